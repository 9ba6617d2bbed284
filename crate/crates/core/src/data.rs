//! Synthetic source/target domain pairs with controllable shift,
//! feature-table I/O, and source-prior corruption for the robustness
//! experiment.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ProcalError, Result};
use crate::math::ProbVector;

/// A dataset with inputs and class labels.
///
/// Labels are retained for evaluation only; the adaptation driver sees a
/// label-stripped [`UnlabeledView`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
    domain: String,
    seed: u64,
}

impl LabeledDataset {
    /// Validates and wraps raw samples: every class present, all inputs
    /// finite, and at least `2 * classes` samples.
    pub fn new(
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        domain: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if classes < 1 {
            return Err(ProcalError::Parameter("need at least one class".into()));
        }
        if inputs.len() < 2 * classes {
            return Err(ProcalError::InsufficientData(format!(
                "{} samples for {} classes (need at least {})",
                inputs.len(),
                classes,
                2 * classes
            )));
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(ProcalError::ShapeMismatch("inputs have zero dimension".into()));
        }
        let mut seen = vec![false; classes];
        for (i, (x, &y)) in inputs.iter().zip(&labels).enumerate() {
            if x.len() != dim {
                return Err(ProcalError::ShapeMismatch(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ProcalError::InvalidInput(format!(
                    "sample {i} contains a non-finite value"
                )));
            }
            if y >= classes {
                return Err(ProcalError::Parameter(format!(
                    "label {y} of sample {i} out of range for {classes} classes"
                )));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ProcalError::InsufficientData(format!(
                "class {missing} has no samples"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
            dim,
            domain: domain.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The label-stripped view handed to the optimization path.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            inputs: &self.inputs,
            dim: self.dim,
        }
    }
}

/// A read-only view of a dataset that exposes inputs only.
///
/// The adaptation loop accepts this type, so label access is ruled out at
/// compile time:
///
/// ```compile_fail
/// use procal_core::data::{LabeledDataset, UnlabeledView};
/// fn peek(view: &UnlabeledView<'_>) -> usize {
///     view.label(0) // no such accessor: labels are unreachable here
/// }
/// ```
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    inputs: &'a [Vec<f64>],
    dim: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }
}

/// Affine-plus-noise transformation applied to the source blobs to form
/// the target domain: a rotation in the first coordinate plane, a
/// translation, a spread scale applied per class blob, and extra
/// label-conditional Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    /// Rotation angle in radians, acting on coordinates 0 and 1.
    pub rotation: f64,
    /// Translation added after rotation; length must equal the data
    /// dimension (missing entries are treated as zero).
    pub translation: Vec<f64>,
    /// Multiplier on each class blob's spread (must be positive).
    pub class_scale: f64,
    /// Standard deviation of label-conditional noise added to target
    /// samples (non-negative).
    pub noise_std: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: Vec::new(),
            class_scale: 1.0,
            noise_std: 0.0,
        }
    }
}

impl ShiftSpec {
    fn validate(&self) -> Result<()> {
        if !self.rotation.is_finite() {
            return Err(ProcalError::Parameter("rotation must be finite".into()));
        }
        if self.class_scale <= 0.0 || !self.class_scale.is_finite() {
            return Err(ProcalError::Parameter(format!(
                "class_scale must be positive, got {}",
                self.class_scale
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(ProcalError::Parameter(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(ProcalError::Parameter("translation must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian-blob domain pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSpec {
    pub classes: usize,
    pub dim: usize,
    /// Sample count of class 0 in each domain; later classes shrink by
    /// `class_ratio`.
    pub n_per_class: usize,
    /// Standard deviation of each source blob around its mean.
    pub cluster_std: f64,
    /// Geometric class-imbalance factor: class `c` gets
    /// `round(n_per_class * class_ratio^c)` samples (at least 10).
    /// 1.0 means balanced classes.
    pub class_ratio: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec {
            classes: 2,
            dim: 2,
            n_per_class: 100,
            cluster_std: 0.15,
            class_ratio: 1.0,
            shift: ShiftSpec::default(),
            seed: 0,
        }
    }
}

impl GaussianSpec {
    /// The default desk-scale benchmark: eight imbalanced Gaussian blobs,
    /// rotated by 60 degrees with translation and extra target noise,
    /// sized so the unadapted source model lands well below ceiling on
    /// the target domain.
    pub fn blobs_rot60(seed: u64) -> Self {
        GaussianSpec {
            classes: 8,
            dim: 8,
            n_per_class: 300,
            cluster_std: 0.15,
            class_ratio: 0.7,
            shift: ShiftSpec {
                rotation: 60.0_f64.to_radians(),
                translation: vec![0.3, -0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                class_scale: 1.0,
                noise_std: 0.25,
            },
            seed,
        }
    }
}

const MEAN_REJECTION_ATTEMPTS: usize = 1000;

/// Draws a source/target domain pair of Gaussian blobs.
///
/// Source blobs sit on unit-norm random means with minimum pairwise mean
/// distance `2 * cluster_std`, enforced by rejection. The target draws
/// fresh samples from the same blobs transformed by `shift`. Both
/// datasets are deterministic under `spec.seed`.
pub fn make_gaussian_domains(spec: &GaussianSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 {
        return Err(ProcalError::Parameter("need at least 2 classes".into()));
    }
    if spec.dim < 2 {
        return Err(ProcalError::Parameter("need dimension at least 2".into()));
    }
    if spec.n_per_class < 10 {
        return Err(ProcalError::Parameter("need at least 10 samples per class".into()));
    }
    if spec.cluster_std <= 0.0 || !spec.cluster_std.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "cluster_std must be positive, got {}",
            spec.cluster_std
        )));
    }
    if spec.class_ratio <= 0.0 || spec.class_ratio > 1.0 || !spec.class_ratio.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "class_ratio must lie in (0, 1], got {}",
            spec.class_ratio
        )));
    }
    spec.shift.validate()?;
    if !spec.shift.translation.is_empty() && spec.shift.translation.len() != spec.dim {
        return Err(ProcalError::ShapeMismatch(format!(
            "translation has {} entries, data dimension is {}",
            spec.shift.translation.len(),
            spec.dim
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let means = sample_separated_means(spec.classes, spec.dim, 2.0 * spec.cluster_std, &mut rng)?;
    let counts: Vec<usize> = (0..spec.classes)
        .map(|c| {
            let scaled = spec.n_per_class as f64 * spec.class_ratio.powi(c as i32);
            (scaled.round() as usize).max(10)
        })
        .collect();

    let n: usize = counts.iter().sum();
    let mut source_inputs = Vec::with_capacity(n);
    let mut source_labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..counts[c] {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| m + spec.cluster_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            source_inputs.push(x);
            source_labels.push(c);
        }
    }

    let mut target_inputs = Vec::with_capacity(n);
    let mut target_labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..counts[c] {
            // Fresh draw around the class mean with the scaled spread,
            // then the affine shift, then label-conditional noise.
            let raw: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    m + spec.shift.class_scale
                        * spec.cluster_std
                        * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let mut x = rotate_in_plane(&raw, spec.shift.rotation);
            for (xi, &t) in x.iter_mut().zip(spec.shift.translation.iter()) {
                *xi += t;
            }
            if spec.shift.noise_std > 0.0 {
                for xi in &mut x {
                    *xi += spec.shift.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            target_inputs.push(x);
            target_labels.push(c);
        }
    }

    let source = LabeledDataset::new(source_inputs, source_labels, spec.classes, "source", spec.seed)?;
    let target = LabeledDataset::new(target_inputs, target_labels, spec.classes, "target", spec.seed)?;
    Ok((source, target))
}

fn sample_separated_means(
    classes: usize,
    dim: usize,
    min_dist: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<f64>>> {
    for _ in 0..MEAN_REJECTION_ATTEMPTS {
        let means: Vec<Vec<f64>> = (0..classes).map(|_| random_unit_vector(dim, rng)).collect();
        let ok = means.iter().enumerate().all(|(i, a)| {
            means[..i]
                .iter()
                .all(|b| euclidean_distance(a, b) >= min_dist)
        });
        if ok {
            return Ok(means);
        }
    }
    Err(ProcalError::Generation(format!(
        "could not place {classes} unit-norm means with pairwise distance {min_dist} \
         after {MEAN_REJECTION_ATTEMPTS} attempts"
    )))
}

fn random_unit_vector(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Rotates coordinates 0 and 1 by `angle`, leaving the rest untouched.
fn rotate_in_plane(x: &[f64], angle: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    if angle != 0.0 && x.len() >= 2 {
        let (sin, cos) = angle.sin_cos();
        out[0] = cos * x[0] - sin * x[1];
        out[1] = sin * x[0] + cos * x[1];
    }
    out
}

/// Replaces a uniformly random `floor(rate * N)`-subset of priors with a
/// one-hot on a uniformly random class different from the prior's argmax.
/// Untouched entries are returned as-is. Deterministic under `seed`.
pub fn corrupt_source_priors(
    priors: &[ProbVector],
    noise_rate: f64,
    seed: u64,
) -> Result<Vec<ProbVector>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(ProcalError::Parameter(format!(
            "noise rate {noise_rate} outside [0, 1]"
        )));
    }
    let n = priors.len();
    let flips = (noise_rate * n as f64).floor() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut out: Vec<ProbVector> = priors.to_vec();
    for &i in order.iter().take(flips) {
        let classes = priors[i].len();
        if classes < 2 {
            return Err(ProcalError::Parameter(
                "cannot corrupt priors with fewer than 2 classes".into(),
            ));
        }
        let old = priors[i].argmax();
        // Uniform over the classes other than the current argmax.
        let mut new_class = rng.gen_range(0..classes - 1);
        if new_class >= old {
            new_class += 1;
        }
        out[i] = ProbVector::one_hot(classes, new_class)?;
    }
    Ok(out)
}

/// Writes a dataset in the feature-table format:
///
/// ```text
/// #meta,C=<classes>,d=<dim>
/// id,label,x0,...,x{d-1}
/// 0,3,0.25,-1.5,...
/// ```
///
/// Values use shortest round-trip decimal encoding so a load reproduces
/// the exact doubles.
pub fn write_feature_table(dataset: &LabeledDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#meta,C={},d={}", dataset.classes(), dataset.dim());
    out.push_str("id,label");
    for j in 0..dataset.dim() {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{i},{}", dataset.label(i));
        for v in dataset.input(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_feature_table(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_feature_table(dataset))?;
    Ok(())
}

/// Parses a feature table, reporting the line number of the first
/// malformed row. Row order is preserved.
pub fn parse_feature_table(text: &str, domain: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate();

    let (_, meta) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected #meta line"))?;
    let (classes, dim) = parse_meta(meta)?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing header line"))?;
    let mut expected_header = String::from("id,label");
    for j in 0..dim {
        let _ = write!(expected_header, ",x{j}");
    }
    if header.trim_end() != expected_header {
        return Err(parse_err(2, format!("header must be `{expected_header}`")));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", dim + 2, fields.len()),
            ));
        }
        fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(line_no, format!("invalid id `{}`", fields[0])))?;
        let label: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid label `{}`", fields[1])))?;
        if label >= classes {
            return Err(parse_err(
                line_no,
                format!("label {label} out of range for C={classes}"),
            ));
        }
        let mut x = Vec::with_capacity(dim);
        for f in &fields[2..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid value `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite value `{f}`")));
            }
            x.push(v);
        }
        inputs.push(x);
        labels.push(label);
    }
    LabeledDataset::new(inputs, labels, classes, domain, 0)
}

pub fn load_feature_table(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let domain = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("table")
        .to_string();
    parse_feature_table(&text, &domain)
}

fn parse_meta(line: &str) -> Result<(usize, usize)> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 3 || fields[0] != "#meta" {
        return Err(parse_err(1, "expected `#meta,C=<int>,d=<int>`"));
    }
    let classes = fields[1]
        .strip_prefix("C=")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| parse_err(1, format!("invalid class count `{}`", fields[1])))?;
    let dim = fields[2]
        .strip_prefix("d=")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| parse_err(1, format!("invalid dimension `{}`", fields[2])))?;
    Ok((classes, dim))
}

fn parse_err(line: usize, message: impl Into<String>) -> ProcalError {
    ProcalError::Parse {
        line,
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> GaussianSpec {
        GaussianSpec {
            classes: 3,
            dim: 2,
            n_per_class: 12,
            cluster_std: 0.2,
            class_ratio: 1.0,
            shift: ShiftSpec {
                rotation: 0.5,
                translation: vec![0.1, -0.2],
                class_scale: 1.2,
                noise_std: 0.05,
            },
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (s1, t1) = make_gaussian_domains(&small_spec(11)).unwrap();
        let (s2, t2) = make_gaussian_domains(&small_spec(11)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let (s3, _) = make_gaussian_domains(&small_spec(12)).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn zero_shift_keeps_distribution_parameters() {
        let mut spec = small_spec(5);
        spec.shift = ShiftSpec::default();
        let (source, target) = make_gaussian_domains(&spec).unwrap();
        // Fresh draws, same blobs: class means of source and target agree
        // within a few standard errors.
        let tol = 4.0 * spec.cluster_std / (spec.n_per_class as f64).sqrt();
        for c in 0..spec.classes {
            for d in 0..spec.dim {
                let mean_of = |ds: &LabeledDataset| {
                    let vals: Vec<f64> = (0..ds.len())
                        .filter(|&i| ds.label(i) == c)
                        .map(|i| ds.input(i)[d])
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                assert!((mean_of(&source) - mean_of(&target)).abs() < tol);
            }
        }
    }

    #[test]
    fn rotation_pi_negates_means_in_2d() {
        let mut spec = small_spec(6);
        spec.n_per_class = 400;
        spec.cluster_std = 0.05;
        spec.shift = ShiftSpec {
            rotation: std::f64::consts::PI,
            translation: vec![],
            class_scale: 1.0,
            noise_std: 0.0,
        };
        let (source, target) = make_gaussian_domains(&spec).unwrap();
        let tol = 4.0 * spec.cluster_std / (spec.n_per_class as f64).sqrt();
        for c in 0..spec.classes {
            for d in 0..2 {
                let mean_of = |ds: &LabeledDataset| {
                    let vals: Vec<f64> = (0..ds.len())
                        .filter(|&i| ds.label(i) == c)
                        .map(|i| ds.input(i)[d])
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                assert!(
                    (mean_of(&source) + mean_of(&target)).abs() < tol,
                    "class {c} coord {d}"
                );
            }
        }
    }

    #[test]
    fn infeasible_separation_errors() {
        let spec = GaussianSpec {
            classes: 40,
            dim: 2,
            n_per_class: 10,
            cluster_std: 0.5, // 40 unit vectors pairwise 1.0 apart cannot fit
            class_ratio: 1.0,
            shift: ShiftSpec::default(),
            seed: 0,
        };
        assert!(matches!(
            make_gaussian_domains(&spec),
            Err(ProcalError::Generation(_))
        ));
    }

    #[test]
    fn corrupt_zero_rate_is_identity() {
        let priors: Vec<ProbVector> = (0..10)
            .map(|i| ProbVector::one_hot(4, i % 4).unwrap())
            .collect();
        let out = corrupt_source_priors(&priors, 0.0, 3).unwrap();
        assert_eq!(out, priors);
    }

    #[test]
    fn corrupt_full_rate_flips_every_argmax() {
        let priors: Vec<ProbVector> = (0..50)
            .map(|i| {
                let mut v = vec![0.1; 4];
                v[i % 4] = 0.7;
                ProbVector::new(v).unwrap()
            })
            .collect();
        let out = corrupt_source_priors(&priors, 1.0, 7).unwrap();
        for (before, after) in priors.iter().zip(&out) {
            assert_ne!(before.argmax(), after.argmax());
        }
    }

    #[test]
    fn corrupt_half_rate_changes_exact_count() {
        let priors: Vec<ProbVector> = (0..100)
            .map(|i| ProbVector::one_hot(5, i % 5).unwrap())
            .collect();
        let out = corrupt_source_priors(&priors, 0.5, 9).unwrap();
        let changed = priors.iter().zip(&out).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 50);
        for p in &out {
            assert!(ProbVector::new(p.to_vec()).is_ok());
        }
    }

    #[test]
    fn corrupt_is_deterministic() {
        let priors: Vec<ProbVector> = (0..30)
            .map(|i| ProbVector::one_hot(3, i % 3).unwrap())
            .collect();
        let a = corrupt_source_priors(&priors, 0.4, 21).unwrap();
        let b = corrupt_source_priors(&priors, 0.4, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_table_round_trips() {
        let (source, _) = make_gaussian_domains(&small_spec(17)).unwrap();
        let text = write_feature_table(&source);
        let parsed = parse_feature_table(&text, source.domain()).unwrap();
        assert_eq!(parsed.len(), source.len());
        assert_eq!(parsed.classes(), source.classes());
        for i in 0..source.len() {
            assert_eq!(parsed.label(i), source.label(i));
            for (a, b) in parsed.input(i).iter().zip(source.input(i)) {
                assert_eq!(a.to_bits(), b.to_bits(), "exact double round trip");
            }
        }
    }

    #[test]
    fn feature_table_happy_path() {
        let text = "#meta,C=2,d=2\nid,label,x0,x1\n0,0,1.5,2.5\n1,1,-0.5,0.25\n2,0,0.0,1.0\n3,1,2.0,-1.0\n";
        let ds = parse_feature_table(text, "t").unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input(1), &[-0.5, 0.25]);
    }

    #[test]
    fn feature_table_reports_line_of_short_row() {
        let text = "#meta,C=2,d=2\nid,label,x0,x1\n0,0,1.5,2.5\n1,1,-0.5\n";
        match parse_feature_table(text, "t") {
            Err(ProcalError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_table_rejects_label_out_of_range() {
        let text = "#meta,C=2,d=1\nid,label,x0\n0,0,1.0\n1,2,2.0\n";
        match parse_feature_table(text, "t") {
            Err(ProcalError::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("label 2"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unlabeled_view_exposes_inputs_only() {
        let (source, _) = make_gaussian_domains(&small_spec(4)).unwrap();
        let view = source.unlabeled();
        assert_eq!(view.len(), source.len());
        assert_eq!(view.dim(), source.dim());
        assert_eq!(view.input(0), source.input(0));
    }
}
