//! End-to-end drivers: supervised source pretraining, the target
//! adaptation loop with iteration-adaptive decay schedules, baseline
//! loops, and the ablation / prior-noise experiment suites.
//!
//! The optimization path runs entirely over an [`UnlabeledView`]; labels
//! reach only the evaluation observer, which logs training dynamics and
//! never feeds back into the updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::data::{corrupt_source_priors, LabeledDataset, UnlabeledView};
use crate::error::{ProcalError, Result};
use crate::math::{ProbVector, ScoreVector};
use crate::memory_bank::{MemoryBank, RefreshPolicy};
use crate::metrics::{
    accuracy_report, evaluate, forgetting_rate, incorrect_supervision_rate, predict,
    SupervisionError,
};
use crate::model::{sgd_step, ModelConfig, ModelParams, OptimizerState};
use crate::objectives::{
    aad_loss, cross_entropy, diversity_loss, im_loss, procal_loss, to_logit_grads,
    CalibrationVariant, ProcalOptions,
};

/// Which loss drives the adaptation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Procal,
    Im,
    Aad,
    SoftOnly,
    DivOnly,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Procal => "procal",
            Objective::Im => "im",
            Objective::Aad => "aad",
            Objective::SoftOnly => "soft_only",
            Objective::DivOnly => "div_only",
        }
    }

    fn uses_calibration(self) -> bool {
        matches!(self, Objective::Procal | Objective::SoftOnly)
    }
}

/// Benchmark families with published hyperparameter tuples
/// `(gamma1, beta1, k, tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFamily {
    Office31,
    OfficeHome,
    Visda,
    Domainnet,
}

/// All hyperparameters of the adaptation loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Decay exponent of the calibration strength gamma.
    pub gamma1: f64,
    /// Decay exponent of the diversity weight beta.
    pub beta1: f64,
    /// Neighborhood size for retrieval.
    pub k: usize,
    /// Memory update frequency knob; see [`RefreshPolicy::from_tau`].
    pub tau: u32,
    /// Dispersion weight of the attract/disperse baseline.
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Which calibration terms participate (ablation knob).
    pub calibration: CalibrationVariant,
    /// Keep the classifier head at its source weights.
    pub freeze_head: bool,
    /// Stop-gradient through the online term of the calibrated target.
    pub detach_self_term: bool,
    /// Read tau directly as the refresh period in mini-batches.
    pub tau_is_period: bool,
    /// Keep the diversity term as a per-sample sum (see objectives).
    pub unnormalized_diversity: bool,
    /// Polynomially decay both learning rates over training.
    pub lr_power_decay: bool,
    /// Fraction of source priors corrupted before the bank freezes them.
    pub noise_rate: f64,
    /// Background-set size per sample for the attract/disperse baseline;
    /// defaults to `k`.
    pub background_size: Option<usize>,
    /// Mini-batches between dynamics-log rows; defaults to half an epoch.
    pub eval_interval: Option<u64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            gamma1: 0.0,
            beta1: 1.0,
            k: 6,
            tau: 2,
            lambda2: 1.0,
            epochs: 15,
            batch_size: 64,
            lr_base: 1e-3,
            lr_head: 1e-2,
            momentum: 0.9,
            seed: 0,
            objective: Objective::Procal,
            calibration: CalibrationVariant::Full,
            freeze_head: false,
            detach_self_term: false,
            tau_is_period: false,
            unnormalized_diversity: false,
            lr_power_decay: false,
            noise_rate: 0.0,
            background_size: None,
            eval_interval: None,
        }
    }
}

impl AdaptationConfig {
    /// Settings for the synthetic blobs-rot60 benchmark. The diversity
    /// term uses the literal per-sample-sum scaling here: with the
    /// batch-normalized form, beta values in [0, 1] leave the diversity
    /// gradient roughly batch_size times too weak to prevent the
    /// attraction collapse it exists to counter.
    pub fn blobs_rot60() -> Self {
        AdaptationConfig {
            gamma1: 0.0,
            beta1: 1.0,
            k: 8,
            tau: 2,
            unnormalized_diversity: true,
            ..AdaptationConfig::default()
        }
    }

    /// Published per-family settings of `(gamma1, beta1, k, tau)`, with
    /// the large-scale family also scaling both learning rates down 10x.
    pub fn for_family(family: DatasetFamily) -> Self {
        let mut cfg = AdaptationConfig::default();
        match family {
            DatasetFamily::Office31 => {
                (cfg.gamma1, cfg.beta1, cfg.k, cfg.tau) = (0.0, 1.0, 6, 2);
            }
            DatasetFamily::OfficeHome => {
                (cfg.gamma1, cfg.beta1, cfg.k, cfg.tau) = (0.0, 0.0, 6, 1);
            }
            DatasetFamily::Visda => {
                (cfg.gamma1, cfg.beta1, cfg.k, cfg.tau) = (30.0, 30.0, 8, 10);
                cfg.lr_base = 1e-4;
                cfg.lr_head = 1e-3;
            }
            DatasetFamily::Domainnet => {
                (cfg.gamma1, cfg.beta1, cfg.k, cfg.tau) = (10.0, 5.0, 2, 2);
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.beta1 < 0.0 {
            return Err(ProcalError::Parameter(
                "decay exponents must be non-negative".into(),
            ));
        }
        if self.k == 0 {
            return Err(ProcalError::Parameter("k must be positive".into()));
        }
        if self.tau == 0 {
            return Err(ProcalError::Parameter("tau must be positive".into()));
        }
        if self.lambda2 < 0.0 {
            return Err(ProcalError::Parameter("lambda2 must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(ProcalError::Parameter("batch_size must be positive".into()));
        }
        if self.lr_base <= 0.0 || self.lr_head <= 0.0 {
            return Err(ProcalError::Parameter("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ProcalError::Parameter("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(ProcalError::Parameter("noise_rate must lie in [0, 1]".into()));
        }
        if self.eval_interval == Some(0) {
            return Err(ProcalError::Parameter("eval_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Iteration-adaptive decay `(1 - iter/max_iter)^exponent`, with
/// `0^0 = 1` so exponent zero means a constant schedule.
pub fn decay_schedule(iter: u64, max_iter: u64, exponent: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(ProcalError::Parameter("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(ProcalError::Parameter(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    if exponent < 0.0 || !exponent.is_finite() {
        return Err(ProcalError::Parameter(format!(
            "decay exponent must be non-negative, got {exponent}"
        )));
    }
    let base = 1.0 - iter as f64 / max_iter as f64;
    Ok(base.powf(exponent))
}

/// Hyperparameters of supervised source pretraining.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 64,
            lr_base: 1e-3,
            lr_head: 1e-2,
            momentum: 0.9,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

// Stream tags for deriving independent RNG seeds from one config seed.
const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN_SHUFFLE: u64 = 2;
const STREAM_ADAPT_SHUFFLE: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const STREAM_BACKGROUND: u64 = 5;

/// SplitMix64 finalizer over a tagged seed.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains the source model with label-smoothed cross-entropy.
/// `epochs = 0` returns the freshly initialized parameters unchanged.
pub fn pretrain_source(
    source: &LabeledDataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<ModelParams> {
    if model_cfg.input_dim != source.dim() || model_cfg.classes != source.classes() {
        return Err(ProcalError::ShapeMismatch(format!(
            "model is {}d/{} classes but dataset is {}d/{} classes",
            model_cfg.input_dim,
            model_cfg.classes,
            source.dim(),
            source.classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(ProcalError::Parameter("batch_size must be positive".into()));
    }
    let mut params = ModelParams::init(model_cfg, derive_seed(cfg.seed, STREAM_INIT))?;
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut optimizer = OptimizerState::new(&params, cfg.lr_base, cfg.lr_head, cfg.momentum)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PRETRAIN_SHUFFLE));
    let mut iteration: u64 = 0;
    for _ in 0..cfg.epochs {
        for batch in shuffled_batches(source.len(), cfg.batch_size, &mut rng) {
            let n = batch.len() as f64;
            let mut loss = 0.0;
            let mut logit_grads = Vec::with_capacity(batch.len());
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (_, _, p) = params.forward(source.input(i))?;
                let (li, gi) = cross_entropy(&p, source.label(i), cfg.label_smoothing)?;
                loss += li / n;
                logit_grads
                    .push(ScoreVector::new(gi.as_slice().iter().map(|g| g / n).collect())?);
                inputs.push(source.input(i));
            }
            if !loss.is_finite() {
                return Err(ProcalError::divergence(
                    format!("pretraining loss became {loss}"),
                    Some(iteration),
                ));
            }
            let grads = params.backward(&inputs, &logit_grads)?;
            sgd_step(&mut params, &grads, &mut optimizer).map_err(|e| attach_iteration(e, iteration))?;
            iteration += 1;
        }
    }
    if !params.all_finite() {
        return Err(ProcalError::divergence(
            "pretrained parameters are not finite",
            Some(iteration),
        ));
    }
    Ok(params)
}

/// One row of the training-dynamics log.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRow {
    pub iteration: u64,
    pub epoch: u64,
    pub target_accuracy: f64,
    pub forgetting_rate: f64,
    pub incorrect_supervision_rate: f64,
    pub loss_total: f64,
    pub loss_soft: f64,
    pub loss_div: f64,
    pub gamma_value: f64,
    pub beta_value: f64,
}

/// Training-dynamics rows in iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicsLog {
    rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    pub fn rows(&self) -> &[DynamicsRow] {
        &self.rows
    }

    fn push(&mut self, row: DynamicsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(ProcalError::Parameter(format!(
                    "dynamics iterations must increase: {} after {}",
                    row.iteration, last.iteration
                )));
            }
        }
        for (name, rate) in [
            ("target_accuracy", row.target_accuracy),
            ("forgetting_rate", row.forgetting_rate),
            ("incorrect_supervision_rate", row.incorrect_supervision_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ProcalError::Parameter(format!(
                    "{name} {rate} outside [0, 1]"
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Serializes the log with one column per field, in field order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iteration,epoch,target_accuracy,forgetting_rate,incorrect_supervision_rate,\
             loss_total,loss_soft,loss_div,gamma_value,beta_value\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.target_accuracy,
                r.forgetting_rate,
                r.incorrect_supervision_rate,
                r.loss_total,
                r.loss_soft,
                r.loss_div,
                r.gamma_value,
                r.beta_value
            );
        }
        out
    }
}

/// Final adaptation summary, serialized as the report JSON.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AdaptReport {
    pub objective: String,
    pub final_accuracy: f64,
    pub mean_per_class_accuracy: f64,
    /// Target accuracy of the unadapted source model.
    pub source_accuracy: f64,
    /// Argmax accuracy of the frozen bank priors (reflects corruption).
    pub prior_accuracy: f64,
    pub forgetting_rate: f64,
    pub supervision: SupervisionError,
    pub noise_rate: f64,
    pub epochs: usize,
    pub iterations: u64,
    pub seed: u64,
}

/// Everything produced by one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub theta_t: ModelParams,
    pub log: DynamicsLog,
    pub bank: MemoryBank,
    pub report: AdaptReport,
}

/// Adapts the source model to the unlabeled target domain.
pub fn adapt(
    theta_s: &ModelParams,
    target: &LabeledDataset,
    config: &AdaptationConfig,
) -> Result<AdaptResult> {
    adapt_observed(theta_s, target, config, &mut None)
}

/// Like [`adapt`], additionally leaving the most recent evaluated model
/// snapshot in `last_good`, so callers can persist a usable checkpoint
/// when a run diverges midway.
pub fn adapt_observed(
    theta_s: &ModelParams,
    target: &LabeledDataset,
    config: &AdaptationConfig,
    last_good: &mut Option<(u64, ModelParams)>,
) -> Result<AdaptResult> {
    config.validate()?;
    if theta_s.input_dim() != target.dim() || theta_s.classes() != target.classes() {
        return Err(ProcalError::ShapeMismatch(format!(
            "model is {}d/{} classes but target is {}d/{} classes",
            theta_s.input_dim(),
            theta_s.classes(),
            target.dim(),
            target.classes()
        )));
    }

    let view = target.unlabeled();

    // Initial predictions under the source model.
    let mut features = Vec::with_capacity(view.len());
    let mut source_outputs = Vec::with_capacity(view.len());
    for i in 0..view.len() {
        let (z, _, p) = theta_s.forward(view.input(i))?;
        features.push(z);
        source_outputs.push(p);
    }

    // Optionally corrupt the priors before the bank freezes them.
    let priors = if config.noise_rate > 0.0 {
        corrupt_source_priors(
            &source_outputs,
            config.noise_rate,
            derive_seed(config.seed, STREAM_CORRUPT),
        )?
    } else {
        source_outputs.clone()
    };
    let mut bank = MemoryBank::initialize(&priors, &features, config.k)?;

    // Evaluation-side state: labels live here and in the observer only.
    let labels = target.labels();
    let source_preds: Vec<usize> = source_outputs.iter().map(ProbVector::argmax).collect();
    let source_mask: Vec<bool> = source_preds
        .iter()
        .zip(labels)
        .map(|(p, l)| p == l)
        .collect();
    let source_accuracy = accuracy_report(&source_preds, labels, target.classes())?.overall_accuracy;
    let prior_preds: Vec<usize> = priors.iter().map(ProbVector::argmax).collect();
    let prior_accuracy = accuracy_report(&prior_preds, labels, target.classes())?.overall_accuracy;

    let mut log = DynamicsLog::default();
    let supervision_gamma = config.objective.uses_calibration();
    let theta_t = run_adaptation_loop(
        theta_s.clone(),
        &view,
        &mut bank,
        config,
        |theta: &ModelParams, bank: &MemoryBank, stats: &LoopStats| {
            let preds = predict(theta, target)?;
            let report = accuracy_report(&preds, labels, target.classes())?;
            let forget = forgetting_rate(&source_mask, &preds, labels)?;
            let supervision = incorrect_supervision_rate(
                bank,
                labels,
                supervision_gamma.then_some(stats.gamma),
            )?;
            log.push(DynamicsRow {
                iteration: stats.iteration,
                epoch: stats.epoch,
                target_accuracy: report.overall_accuracy,
                forgetting_rate: forget,
                incorrect_supervision_rate: supervision.completely_incorrect,
                loss_total: stats.loss_total,
                loss_soft: stats.loss_soft,
                loss_div: stats.loss_div,
                gamma_value: stats.gamma,
                beta_value: stats.beta,
            })?;
            *last_good = Some((stats.iteration, theta.clone()));
            Ok(())
        },
    )?;

    let final_preds = predict(&theta_t, target)?;
    let final_report = accuracy_report(&final_preds, labels, target.classes())?;
    let forget = forgetting_rate(&source_mask, &final_preds, labels)?;
    let last_gamma = log.rows().last().map_or(1.0, |r| r.gamma_value);
    let supervision =
        incorrect_supervision_rate(&bank, labels, supervision_gamma.then_some(last_gamma))?;
    Ok(AdaptResult {
        report: AdaptReport {
            objective: config.objective.as_str().to_string(),
            final_accuracy: final_report.overall_accuracy,
            mean_per_class_accuracy: final_report.mean_per_class_accuracy,
            source_accuracy,
            prior_accuracy,
            forgetting_rate: forget,
            supervision,
            noise_rate: config.noise_rate,
            epochs: config.epochs,
            iterations: (config.epochs as u64)
                * (target.len() as u64).div_ceil(config.batch_size as u64),
            seed: config.seed,
        },
        theta_t,
        log,
        bank,
    })
}

struct LoopStats {
    iteration: u64,
    epoch: u64,
    loss_total: f64,
    loss_soft: f64,
    loss_div: f64,
    gamma: f64,
    beta: f64,
}

/// The optimization loop proper. It sees the target data only through
/// the label-free view; everything label-dependent happens in `observe`.
fn run_adaptation_loop(
    mut theta: ModelParams,
    data: &UnlabeledView<'_>,
    bank: &mut MemoryBank,
    config: &AdaptationConfig,
    mut observe: impl FnMut(&ModelParams, &MemoryBank, &LoopStats) -> Result<()>,
) -> Result<ModelParams> {
    let n = data.len();
    let batches_per_epoch = (n as u64).div_ceil(config.batch_size as u64);
    let max_iter = config.epochs as u64 * batches_per_epoch;
    if max_iter == 0 {
        return Ok(theta);
    }
    let policy = RefreshPolicy::from_tau(config.tau, batches_per_epoch, config.tau_is_period)?;
    let eval_interval = config
        .eval_interval
        .unwrap_or_else(|| batches_per_epoch.div_ceil(2).max(1));
    let head_lr = if config.freeze_head { 0.0 } else { config.lr_head };
    let mut optimizer = OptimizerState::new(&theta, config.lr_base, head_lr, config.momentum)?;
    let mut shuffle_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(config.seed, STREAM_ADAPT_SHUFFLE));
    let mut background_rng =
        ChaCha12Rng::seed_from_u64(derive_seed(config.seed, STREAM_BACKGROUND));
    let opts = ProcalOptions {
        variant: config.calibration,
        detach_self_term: config.detach_self_term,
        unnormalized_diversity: config.unnormalized_diversity,
    };

    let mut backgrounds: Vec<Vec<usize>> = Vec::new();
    let mut t: u64 = 0;
    for epoch in 0..config.epochs as u64 {
        if config.objective == Objective::Aad {
            backgrounds = sample_backgrounds(bank, config, &mut background_rng)?;
        }
        for batch in shuffled_batches(n, config.batch_size, &mut shuffle_rng) {
            if policy.should_refresh(t) {
                bank.refresh(&theta, data, t)?;
                if config.objective == Objective::Aad {
                    // Neighbor lists just moved; resample so the
                    // disjointness precondition keeps holding.
                    backgrounds = sample_backgrounds(bank, config, &mut background_rng)?;
                }
            }
            let gamma = decay_schedule(t, max_iter, config.gamma1)?;
            let beta = decay_schedule(t, max_iter, config.beta1)?;

            let mut inputs = Vec::with_capacity(batch.len());
            let mut preds = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (_, _, p) = theta
                    .forward(data.input(i))
                    .map_err(|e| attach_iteration(e, t))?;
                preds.push(p);
                inputs.push(data.input(i));
            }

            let (loss_total, loss_soft, loss_div, logit_grads) = match config.objective {
                Objective::Procal => {
                    let (loss, grads) = procal_loss(&batch, &preds, bank, gamma, beta, &opts)?;
                    (loss.total, loss.soft_term, loss.div_term, grads)
                }
                Objective::SoftOnly => {
                    let (loss, grads) = procal_loss(&batch, &preds, bank, gamma, 0.0, &opts)?;
                    (loss.total, loss.soft_term, loss.div_term, grads)
                }
                Objective::DivOnly => {
                    let (div_sum, prob_grads) = diversity_loss(&preds)?;
                    let scale = if config.unnormalized_diversity {
                        1.0
                    } else {
                        1.0 / preds.len() as f64
                    };
                    let scaled: Vec<ScoreVector> = prob_grads
                        .iter()
                        .map(|g| {
                            ScoreVector::new(g.as_slice().iter().map(|x| x * scale).collect())
                        })
                        .collect::<Result<_>>()?;
                    let grads = to_logit_grads(&preds, &scaled)?;
                    let value = scale * div_sum;
                    (value, 0.0, value, grads)
                }
                Objective::Im => {
                    let (loss, grads) = im_loss(&preds)?;
                    (loss.total, loss.entropy_term, loss.marginal_term, grads)
                }
                Objective::Aad => {
                    let neighbor_sets: Vec<Vec<usize>> = batch
                        .iter()
                        .map(|&i| bank.neighbor_list(i).to_vec())
                        .collect();
                    let background_sets: Vec<Vec<usize>> =
                        batch.iter().map(|&i| backgrounds[i].clone()).collect();
                    let (loss, prob_grads) = aad_loss(
                        &batch,
                        &preds,
                        &neighbor_sets,
                        &background_sets,
                        bank,
                        config.lambda2,
                    )?;
                    let grads = to_logit_grads(&preds, &prob_grads)?;
                    (loss.total, loss.attract_term, loss.disperse_term, grads)
                }
            };
            if !loss_total.is_finite() {
                return Err(ProcalError::divergence(
                    format!("objective became {loss_total}"),
                    Some(t),
                ));
            }

            if config.lr_power_decay {
                let progress = t as f64 / max_iter as f64;
                optimizer.lr_scale = (1.0 + 10.0 * progress).powf(-0.75);
            }
            let grads = theta.backward(&inputs, &logit_grads)?;
            sgd_step(&mut theta, &grads, &mut optimizer).map_err(|e| attach_iteration(e, t))?;

            // Keep the cache at most one epoch stale: overwrite the batch
            // entries with the predictions computed this step.
            bank.update_probs(&batch, &preds)?;

            t += 1;
            if t.is_multiple_of(eval_interval) || t == max_iter {
                let stats = LoopStats {
                    iteration: t,
                    epoch,
                    loss_total,
                    loss_soft,
                    loss_div,
                    gamma: decay_schedule(t, max_iter, config.gamma1)?,
                    beta: decay_schedule(t, max_iter, config.beta1)?,
                };
                observe(&theta, bank, &stats)?;
            }
        }
    }
    Ok(theta)
}

fn attach_iteration(e: ProcalError, t: u64) -> ProcalError {
    match e {
        ProcalError::Divergence { message, .. } => ProcalError::Divergence {
            message,
            iteration: Some(t),
        },
        other => other,
    }
}

/// Uniform background sets for the attract/disperse baseline: for every
/// sample, `background_size` indices drawn without replacement from the
/// non-neighbors (excluding the sample itself).
fn sample_backgrounds(
    bank: &MemoryBank,
    config: &AdaptationConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = bank.len();
    let b = config.background_size.unwrap_or(config.k);
    (0..n)
        .map(|i| {
            let neighbors = bank.neighbor_list(i);
            let pool: Vec<usize> = (0..n)
                .filter(|&j| j != i && !neighbors.contains(&j))
                .collect();
            if pool.is_empty() {
                return Ok(Vec::new());
            }
            let take = b.min(pool.len());
            let mut chosen = pool;
            chosen.partial_shuffle(rng, take);
            chosen.truncate(take);
            chosen.sort_unstable();
            Ok(chosen)
        })
        .collect()
}

/// Ablation variants of the joint objective.
pub const ABLATION_VARIANTS: [&str; 7] = [
    "source_only",
    "soft_only",
    "div_only",
    "joint",
    "joint_wo_target",
    "joint_wo_source",
    "joint_wo_both",
];

/// One ablation measurement.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Runs the component ablation over the dataset pair: per seed, the
/// source model is pretrained once and every variant adapts from it.
pub fn run_ablation_suite(
    source: &LabeledDataset,
    target: &LabeledDataset,
    model_cfg: &ModelConfig,
    pretrain_cfg: &PretrainConfig,
    base: &AdaptationConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * ABLATION_VARIANTS.len());
    for &seed in seeds {
        let mut pre = pretrain_cfg.clone();
        pre.seed = seed;
        let theta_s = pretrain_source(source, model_cfg, &pre)?;
        for &variant in &ABLATION_VARIANTS {
            let accuracy = if variant == "source_only" {
                evaluate(&theta_s, target)?.overall_accuracy
            } else {
                let mut cfg = base.clone();
                cfg.seed = seed;
                match variant {
                    "soft_only" => cfg.objective = Objective::SoftOnly,
                    "div_only" => cfg.objective = Objective::DivOnly,
                    "joint" => cfg.objective = Objective::Procal,
                    "joint_wo_target" => {
                        cfg.objective = Objective::Procal;
                        cfg.calibration = CalibrationVariant::WithoutTarget;
                    }
                    "joint_wo_source" => {
                        cfg.objective = Objective::Procal;
                        cfg.calibration = CalibrationVariant::WithoutSource;
                    }
                    "joint_wo_both" => {
                        cfg.objective = Objective::Procal;
                        cfg.calibration = CalibrationVariant::WithoutBoth;
                    }
                    other => unreachable!("unknown variant {other}"),
                }
                adapt(&theta_s, target, &cfg)?.report.final_accuracy
            };
            rows.push(AblationRow {
                variant: variant.to_string(),
                seed,
                accuracy,
            });
        }
    }
    Ok(rows)
}

/// Serializes ablation rows as `variant,seed,accuracy`.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.variant, r.seed, r.accuracy);
    }
    out
}

/// One prior-noise robustness measurement.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NoiseRow {
    pub seed: u64,
    pub noise_rate: f64,
    /// Final accuracy of the adapted model.
    pub adapted_accuracy: f64,
    /// Argmax accuracy of the (corrupted) priors the bank froze.
    pub prior_accuracy: f64,
}

/// Prior-corruption robustness sweep: per seed, pretrain once and adapt
/// with every requested noise rate.
pub fn run_noise_robustness(
    source: &LabeledDataset,
    target: &LabeledDataset,
    model_cfg: &ModelConfig,
    pretrain_cfg: &PretrainConfig,
    base: &AdaptationConfig,
    seeds: &[u64],
    noise_rates: &[f64],
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * noise_rates.len());
    for &seed in seeds {
        let mut pre = pretrain_cfg.clone();
        pre.seed = seed;
        let theta_s = pretrain_source(source, model_cfg, &pre)?;
        for &rate in noise_rates {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.noise_rate = rate;
            let result = adapt(&theta_s, target, &cfg)?;
            rows.push(NoiseRow {
                seed,
                noise_rate: rate,
                adapted_accuracy: result.report.final_accuracy,
                prior_accuracy: result.report.prior_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Serializes noise-robustness rows as
/// `seed,noise_rate,adapted_accuracy,prior_accuracy`.
pub fn noise_to_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("seed,noise_rate,adapted_accuracy,prior_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.seed, r.noise_rate, r.adapted_accuracy, r.prior_accuracy
        );
    }
    out
}
