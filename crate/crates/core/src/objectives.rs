//! Loss functions with their probability-space gradients: the calibrated
//! soft-supervision loss plus diversity loss, and the baselines
//! (information maximization, attract/disperse, supervised cross-entropy
//! for source pretraining).
//!
//! Gradient routing: neighbor aggregates and source priors are cached
//! external signals and never carry gradient. The online prediction
//! inside the calibrated target does, which is where the `2 gamma p`
//! self-feedback term comes from.

use crate::error::{ProcalError, Result};
use crate::math::{dot, xlogx, xlogy, ProbVector, ScoreVector};
use crate::memory_bank::MemoryBank;
use crate::model::softmax_jacobian_vector_product;

/// Which calibration terms participate in the soft target. The ablation
/// suite zeroes the online and/or source term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationVariant {
    Full,
    WithoutTarget,
    WithoutSource,
    WithoutBoth,
}

impl CalibrationVariant {
    fn includes_target(self) -> bool {
        matches!(self, CalibrationVariant::Full | CalibrationVariant::WithoutSource)
    }

    fn includes_source(self) -> bool {
        matches!(self, CalibrationVariant::Full | CalibrationVariant::WithoutTarget)
    }
}

/// A calibrated soft-supervision target `p_cal = p_N + gamma (p_t + p_s)`
/// together with the components needed for gradient routing: the online
/// prediction `p_t` carries gradient, the neighbor aggregate `p_N` and
/// source prior `p_s` do not.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedTarget {
    p_cal: ScoreVector,
    p_n: ScoreVector,
    p_t: Option<ProbVector>,
    p_s: Option<ProbVector>,
    gamma: f64,
}

impl CalibratedTarget {
    pub fn p_cal(&self) -> &ScoreVector {
        &self.p_cal
    }

    pub fn neighbor_aggregate(&self) -> &ScoreVector {
        &self.p_n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The gradient-free part `q = p_N + gamma p_s` (dropping the source
    /// term when it was ablated).
    pub fn external_signal(&self) -> ScoreVector {
        let mut q = self.p_n.to_vec();
        if let Some(ps) = &self.p_s {
            for (qk, &sk) in q.iter_mut().zip(ps.as_slice()) {
                *qk += self.gamma * sk;
            }
        }
        ScoreVector::new(q).expect("finite components")
    }

    /// Coefficient of the online prediction inside the target: `gamma`
    /// normally, zero when the online term is ablated.
    pub fn self_weight(&self) -> f64 {
        if self.p_t.is_some() {
            self.gamma
        } else {
            0.0
        }
    }
}

/// Builds the full calibrated target `p_N + gamma (p_t + p_s)`.
pub fn calibrate(
    p_n: &ScoreVector,
    p_t: &ProbVector,
    p_s: &ProbVector,
    gamma: f64,
) -> Result<CalibratedTarget> {
    calibrate_variant(p_n, p_t, p_s, gamma, CalibrationVariant::Full)
}

/// Builds a calibrated target with the online and/or source term
/// optionally zeroed.
pub fn calibrate_variant(
    p_n: &ScoreVector,
    p_t: &ProbVector,
    p_s: &ProbVector,
    gamma: f64,
    variant: CalibrationVariant,
) -> Result<CalibratedTarget> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "calibration strength gamma must be non-negative, got {gamma}"
        )));
    }
    let c = p_n.len();
    if p_t.len() != c || p_s.len() != c {
        return Err(ProcalError::ShapeMismatch(format!(
            "calibration components have lengths {}, {}, {}",
            c,
            p_t.len(),
            p_s.len()
        )));
    }
    let include_t = variant.includes_target();
    let include_s = variant.includes_source();
    let entries: Vec<f64> = (0..c)
        .map(|k| {
            let mut v = p_n.as_slice()[k];
            if include_t {
                v += gamma * p_t.as_slice()[k];
            }
            if include_s {
                v += gamma * p_s.as_slice()[k];
            }
            v
        })
        .collect();
    Ok(CalibratedTarget {
        p_cal: ScoreVector::new(entries)?,
        p_n: p_n.clone(),
        p_t: include_t.then(|| p_t.clone()),
        p_s: include_s.then(|| p_s.clone()),
        gamma,
    })
}

/// Negative mean dot product between calibrated targets and predictions.
///
/// Returns the loss and the per-sample probability-space gradient,
/// computed from the calibration components by the product rule:
/// `-(p_cal + gamma p) / n`, which equals `-(q + 2 gamma p) / n`. With
/// `detach_self_term` the online term inside the target is treated as a
/// constant and the gradient reduces to `-p_cal / n`.
pub fn soft_loss(
    targets: &[CalibratedTarget],
    predictions: &[ProbVector],
    detach_self_term: bool,
) -> Result<(f64, Vec<ScoreVector>)> {
    if targets.len() != predictions.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "{} targets but {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    if targets.is_empty() {
        return Err(ProcalError::Parameter("soft loss of an empty batch".into()));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (t, p) in targets.iter().zip(predictions) {
        if t.p_cal.len() != p.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "target has {} classes, prediction has {}",
                t.p_cal.len(),
                p.len()
            )));
        }
        loss -= dot(t.p_cal.as_slice(), p.as_slice()) / n;
        let self_coeff = if detach_self_term { 0.0 } else { t.self_weight() };
        let g: Vec<f64> = t
            .p_cal
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&cal, &pk)| -(cal + self_coeff * pk) / n)
            .collect();
        grads.push(ScoreVector::new(g)?);
    }
    Ok((loss, grads))
}

/// Diversity penalty in its literal per-sample-sum form:
/// `sum_i p_i . p_hat` with `p_hat` the batch mean prediction. Equals
/// `(1/n) ||sum_i p_i||^2`. The gradient flows through both occurrences
/// of each prediction, giving `2 p_hat` for every sample.
pub fn diversity_loss(predictions: &[ProbVector]) -> Result<(f64, Vec<ScoreVector>)> {
    if predictions.is_empty() {
        return Err(ProcalError::Parameter("diversity loss of an empty batch".into()));
    }
    let c = predictions[0].len();
    if predictions.iter().any(|p| p.len() != c) {
        return Err(ProcalError::ShapeMismatch(
            "predictions have inconsistent lengths".into(),
        ));
    }
    let n = predictions.len() as f64;
    let mut mean = vec![0.0; c];
    for p in predictions {
        for (m, &pk) in mean.iter_mut().zip(p.as_slice()) {
            *m += pk / n;
        }
    }
    let loss: f64 = predictions.iter().map(|p| dot(p.as_slice(), &mean)).sum();
    let grad = ScoreVector::new(mean.iter().map(|&m| 2.0 * m).collect())?;
    Ok((loss, vec![grad; predictions.len()]))
}

/// Scalar components of the joint calibrated objective
/// `total = soft + beta * div`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub soft_term: f64,
    pub div_term: f64,
    pub beta: f64,
}

impl BatchLoss {
    pub fn new(soft_term: f64, div_term: f64, beta: f64) -> Self {
        BatchLoss {
            total: soft_term + beta * div_term,
            soft_term,
            div_term,
            beta,
        }
    }
}

/// Knobs for [`procal_loss`] routing and scaling.
#[derive(Debug, Clone, Copy)]
pub struct ProcalOptions {
    pub variant: CalibrationVariant,
    /// Stop-gradient alternative for the online term inside the target.
    pub detach_self_term: bool,
    /// Keep the diversity term as a per-sample sum instead of normalizing
    /// it by batch size (the normalized form makes `beta` batch-size
    /// independent and is the default).
    pub unnormalized_diversity: bool,
}

impl Default for ProcalOptions {
    fn default() -> Self {
        ProcalOptions {
            variant: CalibrationVariant::Full,
            detach_self_term: false,
            unnormalized_diversity: false,
        }
    }
}

/// The joint calibrated objective over a mini-batch: builds each sample's
/// calibrated target from the bank, combines the soft and diversity
/// terms, and maps the probability-space gradient to logit space through
/// the softmax Jacobian.
pub fn procal_loss(
    batch_indices: &[usize],
    predictions: &[ProbVector],
    bank: &MemoryBank,
    gamma: f64,
    beta: f64,
    opts: &ProcalOptions,
) -> Result<(BatchLoss, Vec<ScoreVector>)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let targets = build_targets(batch_indices, predictions, bank, gamma, opts.variant)?;
    let (soft_term, soft_grads) = soft_loss(&targets, predictions, opts.detach_self_term)?;
    let (div_sum, div_grads) = diversity_loss(predictions)?;
    let div_scale = if opts.unnormalized_diversity {
        1.0
    } else {
        1.0 / predictions.len() as f64
    };
    let loss = BatchLoss::new(soft_term, div_scale * div_sum, beta);

    let mut logit_grads = Vec::with_capacity(predictions.len());
    for ((p, sg), dg) in predictions.iter().zip(&soft_grads).zip(&div_grads) {
        let combined: Vec<f64> = sg
            .as_slice()
            .iter()
            .zip(dg.as_slice())
            .map(|(&s, &d)| s + beta * div_scale * d)
            .collect();
        logit_grads.push(softmax_jacobian_vector_product(p, &ScoreVector::new(combined)?)?);
    }
    Ok((loss, logit_grads))
}

/// Builds the calibrated targets of a mini-batch from bank state:
/// `p_N` from cached neighbor probabilities, `p_s` from the frozen
/// priors, and `p_t` from the supplied online predictions.
pub fn build_targets(
    batch_indices: &[usize],
    predictions: &[ProbVector],
    bank: &MemoryBank,
    gamma: f64,
    variant: CalibrationVariant,
) -> Result<Vec<CalibratedTarget>> {
    if batch_indices.len() != predictions.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "{} indices but {} predictions",
            batch_indices.len(),
            predictions.len()
        )));
    }
    batch_indices
        .iter()
        .zip(predictions)
        .map(|(&i, p)| {
            if i >= bank.len() {
                return Err(ProcalError::Parameter(format!(
                    "batch index {i} out of range for bank of {}",
                    bank.len()
                )));
            }
            calibrate_variant(
                &bank.neighborhood_probability(i),
                p,
                bank.source_prior(i),
                gamma,
                variant,
            )
        })
        .collect()
}

/// Components of the information-maximization objective: mean per-sample
/// entropy plus the negative entropy of the batch-mean prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImLoss {
    pub total: f64,
    pub entropy_term: f64,
    pub marginal_term: f64,
}

/// Information maximization over a mini-batch. Returns the loss
/// components and per-sample logit-space gradients (gradient flows
/// through both the per-sample term and the batch mean).
pub fn im_loss(predictions: &[ProbVector]) -> Result<(ImLoss, Vec<ScoreVector>)> {
    if predictions.is_empty() {
        return Err(ProcalError::Parameter("IM loss of an empty batch".into()));
    }
    let c = predictions[0].len();
    if predictions.iter().any(|p| p.len() != c) {
        return Err(ProcalError::ShapeMismatch(
            "predictions have inconsistent lengths".into(),
        ));
    }
    let n = predictions.len() as f64;
    let mut mean = vec![0.0; c];
    for p in predictions {
        for (m, &pk) in mean.iter_mut().zip(p.as_slice()) {
            *m += pk / n;
        }
    }
    let entropy_term = predictions
        .iter()
        .map(|p| -p.as_slice().iter().map(|&x| xlogx(x)).sum::<f64>())
        .sum::<f64>()
        / n;
    let marginal_term: f64 = mean.iter().map(|&m| xlogx(m)).sum();
    let total = entropy_term + marginal_term;

    // Probability-space gradient is (log p_hat - log p) / n per entry;
    // pushing it through the softmax Jacobian gives
    // (u_k - p_k sum_j u_j) / n with u_k = p_k (log p_hat_k - log p_k).
    // The xlogy guards keep saturated predictions finite.
    let mut grads = Vec::with_capacity(predictions.len());
    for p in predictions {
        let u: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(&mean)
            .map(|(&pk, &mk)| xlogy(pk, mk) - xlogx(pk))
            .collect();
        let u_sum: f64 = u.iter().sum();
        let g: Vec<f64> = u
            .iter()
            .zip(p.as_slice())
            .map(|(&uk, &pk)| (uk - pk * u_sum) / n)
            .collect();
        grads.push(ScoreVector::new(g)?);
    }
    Ok((
        ImLoss {
            total,
            entropy_term,
            marginal_term,
        },
        grads,
    ))
}

/// Components of the attract/disperse objective
/// `total = attract + lambda2 * disperse`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AadLoss {
    pub total: f64,
    pub attract_term: f64,
    pub disperse_term: f64,
    pub lambda2: f64,
}

/// Attract/disperse objective: pull each prediction toward its cached
/// neighbor predictions and push it from a disjoint background set.
/// Cached probabilities carry no gradient, so the probability-space
/// gradient of sample `i` is
/// `(-sum_{j in C_i} p_j + lambda2 sum_{m in B_i} p_m) / n`.
pub fn aad_loss(
    batch_indices: &[usize],
    predictions: &[ProbVector],
    neighbor_sets: &[Vec<usize>],
    background_sets: &[Vec<usize>],
    bank: &MemoryBank,
    lambda2: f64,
) -> Result<(AadLoss, Vec<ScoreVector>)> {
    let n = batch_indices.len();
    if n == 0 {
        return Err(ProcalError::Parameter("AaD loss of an empty batch".into()));
    }
    if predictions.len() != n || neighbor_sets.len() != n || background_sets.len() != n {
        return Err(ProcalError::ShapeMismatch(format!(
            "batch size {n} but {} predictions, {} neighbor sets, {} background sets",
            predictions.len(),
            neighbor_sets.len(),
            background_sets.len()
        )));
    }
    if lambda2 < 0.0 || !lambda2.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "lambda2 must be non-negative, got {lambda2}"
        )));
    }
    let nf = n as f64;
    let mut attract = 0.0;
    let mut disperse = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (((&i, p), nbrs), bg) in batch_indices
        .iter()
        .zip(predictions)
        .zip(neighbor_sets)
        .zip(background_sets)
    {
        for &m in bg {
            if m == i || nbrs.contains(&m) {
                return Err(ProcalError::Parameter(format!(
                    "background sample {m} overlaps the neighborhood of sample {i}"
                )));
            }
        }
        let mut g = vec![0.0; p.len()];
        for &j in nbrs {
            attract -= dot(p.as_slice(), bank.prob(j).as_slice()) / nf;
            for (gk, &pj) in g.iter_mut().zip(bank.prob(j).as_slice()) {
                *gk -= pj / nf;
            }
        }
        for &m in bg {
            disperse += dot(p.as_slice(), bank.prob(m).as_slice()) / nf;
            for (gk, &pm) in g.iter_mut().zip(bank.prob(m).as_slice()) {
                *gk += lambda2 * pm / nf;
            }
        }
        grads.push(ScoreVector::new(g)?);
    }
    Ok((
        AadLoss {
            total: attract + lambda2 * disperse,
            attract_term: attract,
            disperse_term: disperse,
            lambda2,
        },
        grads,
    ))
}

/// Label-smoothed cross-entropy for supervised source pretraining.
///
/// Returns the per-sample loss and the logit-space gradient `p - y` with
/// `y = (1 - eps) one_hot + eps / C`. The logit form is the softmax
/// Jacobian applied to `-y / p` in closed form, which stays finite even
/// for saturated predictions.
pub fn cross_entropy(p: &ProbVector, label: usize, smoothing: f64) -> Result<(f64, ScoreVector)> {
    let c = p.len();
    if label >= c {
        return Err(ProcalError::Parameter(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ProcalError::Parameter(format!(
            "label smoothing {smoothing} outside [0, 1)"
        )));
    }
    let base = smoothing / c as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(c);
    for (k, &pk) in p.as_slice().iter().enumerate() {
        let y = if k == label { 1.0 - smoothing + base } else { base };
        if y > 0.0 {
            loss -= y * pk.ln();
        }
        grad.push(pk - y);
    }
    Ok((loss, ScoreVector::new(grad)?))
}

/// Applies the softmax Jacobian to every sample's probability-space
/// gradient, producing the logit-space gradients consumed by backprop.
pub fn to_logit_grads(
    predictions: &[ProbVector],
    prob_grads: &[ScoreVector],
) -> Result<Vec<ScoreVector>> {
    if predictions.len() != prob_grads.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "{} predictions but {} gradients",
            predictions.len(),
            prob_grads.len()
        )));
    }
    predictions
        .iter()
        .zip(prob_grads)
        .map(|(p, g)| softmax_jacobian_vector_product(p, g))
        .collect()
}
