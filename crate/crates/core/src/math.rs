//! Elementary numerical primitives shared by every other module:
//! simplex-valued vectors, softmax, normalization, similarity, entropy.
//!
//! All arithmetic is `f64`; tolerances are chosen so that softmax
//! round-off passes validation while construction bugs do not.

use serde::{Deserialize, Serialize};

use crate::error::{ProcalError, Result};

/// Absolute tolerance on the simplex sum when validating a [`ProbVector`].
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

/// Norm below which a feature vector is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A point on the C-class probability simplex.
///
/// Entries are non-negative and sum to one within [`SIMPLEX_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and wraps `entries`.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(ProcalError::InvalidInput(
                "probability vector must be non-empty".into(),
            ));
        }
        let mut sum = 0.0;
        for (k, &p) in entries.iter().enumerate() {
            if !p.is_finite() {
                return Err(ProcalError::InvalidInput(format!(
                    "probability entry {k} is not finite: {p}"
                )));
            }
            if p < 0.0 {
                return Err(ProcalError::InvalidInput(format!(
                    "probability entry {k} is negative: {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(ProcalError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1 within {SIMPLEX_SUM_TOL}"
            )));
        }
        Ok(ProbVector(entries))
    }

    /// The uniform distribution over `classes` classes.
    pub fn uniform(classes: usize) -> Self {
        assert!(classes > 0, "uniform distribution needs at least one class");
        ProbVector(vec![1.0 / classes as f64; classes])
    }

    /// A one-hot distribution with all mass on `class`.
    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(ProcalError::Parameter(format!(
                "one-hot class {class} out of range for {classes} classes"
            )));
        }
        let mut entries = vec![0.0; classes];
        entries[class] = 1.0;
        Ok(ProbVector(entries))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A vector of C unconstrained finite reals: logits or unnormalized
/// probability aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Validates that every entry is finite.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        for (k, &s) in entries.iter().enumerate() {
            if !s.is_finite() {
                return Err(ProcalError::InvalidInput(format!(
                    "score entry {k} is not finite: {s}"
                )));
            }
        }
        Ok(ScoreVector(entries))
    }

    /// All-zero scores of the given length.
    pub fn zeros(len: usize) -> Self {
        ScoreVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of the largest entry; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl From<ProbVector> for ScoreVector {
    fn from(p: ProbVector) -> Self {
        ScoreVector(p.0)
    }
}

/// An h-dimensional embedding produced by the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Validates that every entry is finite.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        for (k, &x) in entries.iter().enumerate() {
            if !x.is_finite() {
                return Err(ProcalError::InvalidInput(format!(
                    "feature entry {k} is not finite: {x}"
                )));
            }
        }
        Ok(FeatureVector(entries))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Numerically stable softmax: invariant to adding a constant to all
/// logits thanks to max subtraction.
pub fn softmax(logits: &ScoreVector) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(ProcalError::InvalidInput("softmax of empty vector".into()));
    }
    let max = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.as_slice().iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    ProbVector::new(exps)
}

/// Scales `v` to unit Euclidean norm, preserving direction.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let norm = v.norm();
    if norm <= DEGENERATE_NORM {
        return Err(ProcalError::DegenerateFeature(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(FeatureVector(v.as_slice().iter().map(|x| x / norm).collect()))
}

/// Cosine similarity between two feature vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return Err(ProcalError::DegenerateFeature(
            "cosine similarity with near-zero vector".into(),
        ));
    }
    let d = dot(a.as_slice(), b.as_slice()) / (na * nb);
    // Round-off can push |d| a hair past 1.
    Ok(d.clamp(-1.0, 1.0))
}

/// Shannon entropy in nats; `0 log 0` is taken as 0 so one-hot vectors
/// have entropy exactly zero.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.as_slice().iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// `x * ln(x)` with the continuous extension `0 * ln(0) = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `x * ln(y)` with `0 * ln(anything) = 0`.
pub fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Plain dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
