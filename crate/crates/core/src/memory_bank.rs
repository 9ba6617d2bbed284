//! Per-sample cache of features, predicted probabilities, and frozen
//! source priors over the whole target set, with exact top-k cosine
//! retrieval and period-controlled refresh.
//!
//! Features are L2-normalized at write time, so cosine similarity
//! reduces to a dot product during retrieval. Neighbor lists are sorted
//! by descending similarity with ties broken by ascending sample index,
//! and never contain the query sample itself.

use std::fmt::Write as _;

use crate::data::UnlabeledView;
use crate::error::{ProcalError, Result};
use crate::math::{l2_normalize, FeatureVector, ProbVector, ScoreVector};
use crate::model::ModelParams;

/// Decides on which mini-batch counts a full bank refresh fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshPolicy {
    period: u64,
}

impl RefreshPolicy {
    /// Builds a policy from the update-frequency knob `tau`.
    ///
    /// By default a larger `tau` yields more frequent refreshes:
    /// `period = max(1, ceil(batches_per_epoch / tau))`, so `tau = 1`
    /// refreshes once per epoch. With `tau_is_period` the knob is read
    /// directly as the period in mini-batches instead.
    pub fn from_tau(tau: u32, batches_per_epoch: u64, tau_is_period: bool) -> Result<Self> {
        if tau == 0 {
            return Err(ProcalError::Parameter("tau must be positive".into()));
        }
        if batches_per_epoch == 0 {
            return Err(ProcalError::Parameter("batches_per_epoch must be positive".into()));
        }
        let period = if tau_is_period {
            u64::from(tau)
        } else {
            batches_per_epoch.div_ceil(u64::from(tau)).max(1)
        };
        Ok(RefreshPolicy { period })
    }

    pub fn with_period(period: u64) -> Result<Self> {
        if period == 0 {
            return Err(ProcalError::Parameter("period must be positive".into()));
        }
        Ok(RefreshPolicy { period })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    /// True exactly at mini-batch counts that are multiples of the period.
    pub fn should_refresh(&self, batch_index: u64) -> bool {
        batch_index.is_multiple_of(self.period)
    }
}

/// The per-sample cache used by neighborhood-based objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Vec<FeatureVector>,
    probs: Vec<ProbVector>,
    source_priors: Vec<ProbVector>,
    neighbor_lists: Vec<Vec<usize>>,
    k: usize,
    classes: usize,
    last_full_refresh: u64,
    priors_frozen: bool,
}

impl MemoryBank {
    /// Builds the bank from the initial model outputs: priors are frozen
    /// to `initial_probs`, cached probabilities start at the same values,
    /// features are L2-normalized, and neighbor lists are built with
    /// `k = min(k_config, N - 1)`.
    pub fn initialize(
        initial_probs: &[ProbVector],
        features: &[FeatureVector],
        k_config: usize,
    ) -> Result<Self> {
        let n = initial_probs.len();
        if n < 2 {
            return Err(ProcalError::InsufficientData(format!(
                "memory bank needs at least 2 samples, got {n}"
            )));
        }
        if features.len() != n {
            return Err(ProcalError::ShapeMismatch(format!(
                "{n} probability vectors but {} feature vectors",
                features.len()
            )));
        }
        if k_config == 0 {
            return Err(ProcalError::Parameter("k must be positive".into()));
        }
        let classes = initial_probs[0].len();
        if initial_probs.iter().any(|p| p.len() != classes) {
            return Err(ProcalError::ShapeMismatch(
                "probability vectors have inconsistent lengths".into(),
            ));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(ProcalError::ShapeMismatch(
                "feature vectors have inconsistent lengths".into(),
            ));
        }
        let normalized: Vec<FeatureVector> =
            features.iter().map(l2_normalize).collect::<Result<_>>()?;
        let k = k_config.min(n - 1);
        let mut bank = MemoryBank {
            features: normalized,
            probs: initial_probs.to_vec(),
            source_priors: Vec::new(),
            neighbor_lists: Vec::new(),
            k,
            classes,
            last_full_refresh: 0,
            priors_frozen: false,
        };
        bank.freeze_source_priors(initial_probs.to_vec())?;
        bank.rebuild_neighbor_lists();
        Ok(bank)
    }

    /// Writes the source priors. They are write-once: a second call is an
    /// error, and [`Self::initialize`] already performs the first write.
    pub fn freeze_source_priors(&mut self, priors: Vec<ProbVector>) -> Result<()> {
        if self.priors_frozen {
            return Err(ProcalError::PriorsAlreadyFrozen);
        }
        if priors.len() != self.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "{} priors for a bank of {} samples",
                priors.len(),
                self.len()
            )));
        }
        self.source_priors = priors;
        self.priors_frozen = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn last_full_refresh(&self) -> u64 {
        self.last_full_refresh
    }

    pub fn feature(&self, i: usize) -> &FeatureVector {
        &self.features[i]
    }

    pub fn prob(&self, i: usize) -> &ProbVector {
        &self.probs[i]
    }

    pub fn source_prior(&self, i: usize) -> &ProbVector {
        &self.source_priors[i]
    }

    pub fn source_priors(&self) -> &[ProbVector] {
        &self.source_priors
    }

    /// The stored neighbor list of sample `i` (built with the bank's `k`).
    pub fn neighbor_list(&self, i: usize) -> &[usize] {
        &self.neighbor_lists[i]
    }

    /// The `k` indices maximizing cosine similarity to sample `i`'s
    /// feature, excluding `i`, sorted by descending similarity with ties
    /// broken by ascending index.
    pub fn top_k_neighbors(&self, i: usize, k: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if i >= n {
            return Err(ProcalError::Parameter(format!(
                "sample index {i} out of range for bank of {n}"
            )));
        }
        if k == 0 || k > n - 1 {
            return Err(ProcalError::Parameter(format!(
                "k = {k} outside valid range 1..={}",
                n - 1
            )));
        }
        // Stored features have unit norm, so the dot product is the
        // cosine similarity.
        let query = self.features[i].as_slice();
        let mut scored: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, crate::math::dot(self.features[j].as_slice(), query)))
            .collect();
        scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().take(k).map(|(j, _)| j).collect())
    }

    fn rebuild_neighbor_lists(&mut self) {
        self.neighbor_lists = (0..self.len())
            .map(|i| self.top_k_neighbors(i, self.k).expect("k is validated at build time"))
            .collect();
    }

    /// Unnormalized elementwise sum of the cached neighbor probabilities
    /// of sample `i`; entries sum to `k`.
    pub fn neighborhood_probability(&self, i: usize) -> ScoreVector {
        let mut acc = vec![0.0; self.classes];
        for &j in &self.neighbor_lists[i] {
            for (a, &p) in acc.iter_mut().zip(self.probs[j].as_slice()) {
                *a += p;
            }
        }
        ScoreVector::new(acc).expect("sums of probabilities are finite")
    }

    /// Recomputes all features and cached probabilities under the current
    /// model and rebuilds every neighbor list. Priors are untouched.
    pub fn refresh(&mut self, model: &ModelParams, data: &UnlabeledView<'_>, iteration: u64) -> Result<()> {
        if data.len() != self.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "bank holds {} samples but dataset has {}",
                self.len(),
                data.len()
            )));
        }
        if model.classes() != self.classes {
            return Err(ProcalError::ShapeMismatch(format!(
                "bank stores {} classes but model outputs {}",
                self.classes,
                model.classes()
            )));
        }
        let mut features = Vec::with_capacity(self.len());
        let mut probs = Vec::with_capacity(self.len());
        for i in 0..data.len() {
            let (z, _, p) = model.forward(data.input(i))?;
            features.push(l2_normalize(&z)?);
            probs.push(p);
        }
        self.features = features;
        self.probs = probs;
        self.rebuild_neighbor_lists();
        self.last_full_refresh = iteration;
        Ok(())
    }

    /// Overwrites the cached probabilities of `indices` with fresh online
    /// predictions. Neighbor lists and features are left alone.
    pub fn update_probs(&mut self, indices: &[usize], fresh: &[ProbVector]) -> Result<()> {
        if indices.len() != fresh.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "{} indices but {} probability vectors",
                indices.len(),
                fresh.len()
            )));
        }
        for (&i, p) in indices.iter().zip(fresh) {
            if i >= self.len() {
                return Err(ProcalError::Parameter(format!(
                    "sample index {i} out of range for bank of {}",
                    self.len()
                )));
            }
            if p.len() != self.classes {
                return Err(ProcalError::ShapeMismatch(format!(
                    "probability vector has {} entries, bank stores {}",
                    p.len(),
                    self.classes
                )));
            }
            self.probs[i] = p.clone();
        }
        Ok(())
    }

    /// Debug dump: one row per sample with semicolon-joined neighbor ids,
    /// priors, and cached probabilities.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("sample_id,neighbor_ids");
        for c in 0..self.classes {
            let _ = write!(out, ",prior_{c}");
        }
        for c in 0..self.classes {
            let _ = write!(out, ",prob_{c}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let ids: Vec<String> = self.neighbor_lists[i].iter().map(usize::to_string).collect();
            let _ = write!(out, "{i},{}", ids.join(";"));
            for v in self.source_priors[i].as_slice() {
                let _ = write!(out, ",{v}");
            }
            for v in self.probs[i].as_slice() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
