//! A small differentiable classifier: a feature extractor `f` (MLP)
//! followed by a classifier head `g` (linear map), with forward
//! evaluation, analytic reverse-mode gradients, and SGD-with-momentum
//! updates.
//!
//! The parameter layout is a plain layer list. The `split` index counts
//! the layers belonging to `f`; the output after applying the first
//! `split` layers is the feature vector `z` used for neighbor retrieval.
//! Layers from `split` onward form the head `g`, whose final output is
//! the logit vector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProcalError, Result};
use crate::math::{softmax, FeatureVector, ProbVector, ScoreVector};

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `s`, given the activation value `a`.
    fn derivative(self, s: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `out = act(W x + b)` with `W` stored row-major
/// (`out_dim` rows of `in_dim` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }
}

/// Weights and biases of the feature extractor and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    split: usize,
    feature_dim: usize,
    classes: usize,
}

/// Architecture description for the default desk-scale network:
/// `input -> hidden (tanh) -> feature (identity) -> classes (identity)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 2,
            hidden_dim: 32,
            feature_dim: 16,
            classes: 2,
        }
    }
}

impl ModelParams {
    /// Builds a model from an explicit layer list.
    ///
    /// `split` counts the layers forming the feature extractor; it may be
    /// zero (features are the raw input) but the head must contain at
    /// least one layer.
    pub fn from_layers(layers: Vec<Layer>, split: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(ProcalError::ShapeMismatch("model needs at least one layer".into()));
        }
        if split >= layers.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "split {} leaves no classifier layer ({} layers total)",
                split,
                layers.len()
            )));
        }
        let mut prev_out: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            let out = layer.out_dim();
            let inp = layer.in_dim();
            if out == 0 || inp == 0 {
                return Err(ProcalError::ShapeMismatch(format!("layer {i} has a zero dimension")));
            }
            for (r, row) in layer.w.iter().enumerate() {
                if row.len() != inp {
                    return Err(ProcalError::ShapeMismatch(format!(
                        "layer {i} weight row {r} has {} entries, expected {inp}",
                        row.len()
                    )));
                }
                for &v in row {
                    if !v.is_finite() {
                        return Err(ProcalError::InvalidInput(format!(
                            "layer {i} has a non-finite weight"
                        )));
                    }
                }
            }
            if layer.w.len() != out {
                return Err(ProcalError::ShapeMismatch(format!(
                    "layer {i} has {} weight rows but {} biases",
                    layer.w.len(),
                    out
                )));
            }
            for &v in &layer.b {
                if !v.is_finite() {
                    return Err(ProcalError::InvalidInput(format!(
                        "layer {i} has a non-finite bias"
                    )));
                }
            }
            if let Some(p) = prev_out {
                if inp != p {
                    return Err(ProcalError::ShapeMismatch(format!(
                        "layer {i} expects input {inp} but previous layer outputs {p}"
                    )));
                }
            }
            prev_out = Some(out);
        }
        let classes = layers.last().unwrap().out_dim();
        let feature_dim = if split == 0 {
            layers[0].in_dim()
        } else {
            layers[split - 1].out_dim()
        };
        Ok(ModelParams {
            layers,
            split,
            feature_dim,
            classes,
        })
    }

    /// Scaled uniform initialization of the default architecture:
    /// weights in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero. Deterministic under `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dims = [
            (config.input_dim, config.hidden_dim, Activation::Tanh),
            (config.hidden_dim, config.feature_dim, Activation::Identity),
            (config.feature_dim, config.classes, Activation::Identity),
        ];
        let mut layers = Vec::with_capacity(dims.len());
        for &(fan_in, fan_out, act) in &dims {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.gen_range(-a..a)).collect())
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                act,
            });
        }
        ModelParams::from_layers(layers, 2)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of layers forming the feature extractor.
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_dim() * l.in_dim() + l.out_dim())
            .sum()
    }

    /// Reads parameter `idx` in the flat order: per layer, weights
    /// row-major then biases.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            let wn = layer.out_dim() * layer.in_dim();
            if idx < wn {
                return layer.w[idx / layer.in_dim()][idx % layer.in_dim()];
            }
            idx -= wn;
            if idx < layer.out_dim() {
                return layer.b[idx];
            }
            idx -= layer.out_dim();
        }
        panic!("parameter index out of range");
    }

    /// Writes parameter `idx` in the flat order used by [`Self::get_param`].
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            let in_dim = layer.in_dim();
            let wn = layer.out_dim() * in_dim;
            if idx < wn {
                layer.w[idx / in_dim][idx % in_dim] = value;
                return;
            }
            idx -= wn;
            if idx < layer.out_dim() {
                layer.b[idx] = value;
                return;
            }
            idx -= layer.out_dim();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().flatten().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite())
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ProcalError::ShapeMismatch(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the network on one input, returning the feature vector `z`,
    /// the logits, and the softmax probabilities.
    ///
    /// Non-finite outputs from finite parameters and inputs mean the
    /// training run exploded, so they surface as a divergence error
    /// rather than an input-validation one.
    pub fn forward(&self, x: &[f64]) -> Result<(FeatureVector, ScoreVector, ProbVector)> {
        self.check_input(x)?;
        for &v in x {
            if !v.is_finite() {
                return Err(ProcalError::InvalidInput("non-finite model input".into()));
            }
        }
        let trace = self.forward_trace(x);
        let as_divergence = |_| ProcalError::divergence("forward produced non-finite values", None);
        let logits = ScoreVector::new(trace.activations.last().unwrap().clone())
            .map_err(as_divergence)?;
        let z = if self.split == 0 {
            FeatureVector::new(x.to_vec())?
        } else {
            FeatureVector::new(trace.activations[self.split - 1].clone()).map_err(as_divergence)?
        };
        let p = softmax(&logits)?;
        Ok((z, logits, p))
    }

    /// Forward pass retaining per-layer pre-activations and activations.
    fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        let mut current: Vec<f64> = x.to_vec();
        for layer in &self.layers {
            let mut s = layer.b.clone();
            for (row, sk) in layer.w.iter().zip(&mut s) {
                *sk += crate::math::dot(row, &current);
            }
            let a: Vec<f64> = s.iter().map(|&v| layer.act.apply(v)).collect();
            pre.push(s);
            current = a.clone();
            act.push(a);
        }
        ForwardTrace {
            input: x.to_vec(),
            pre_activations: pre,
            activations: act,
        }
    }

    /// Accumulates exact analytic parameter gradients over a mini-batch,
    /// given each sample's loss gradient with respect to the logits.
    pub fn backward(&self, batch: &[&[f64]], logit_grads: &[ScoreVector]) -> Result<GradientBuffer> {
        if batch.len() != logit_grads.len() {
            return Err(ProcalError::ShapeMismatch(format!(
                "{} inputs but {} logit gradients",
                batch.len(),
                logit_grads.len()
            )));
        }
        let mut grads = GradientBuffer::zeros_like(self);
        for (x, g) in batch.iter().zip(logit_grads) {
            self.check_input(x)?;
            if g.len() != self.classes {
                return Err(ProcalError::ShapeMismatch(format!(
                    "logit gradient has {} entries, expected {}",
                    g.len(),
                    self.classes
                )));
            }
            let trace = self.forward_trace(x);
            let mut delta: Vec<f64> = g.to_vec();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let pre = &trace.pre_activations[l];
                let act = &trace.activations[l];
                let below: &[f64] = if l == 0 {
                    &trace.input
                } else {
                    &trace.activations[l - 1]
                };
                // delta currently holds dL/da_l; fold in the activation.
                let ds: Vec<f64> = delta
                    .iter()
                    .zip(pre.iter().zip(act))
                    .map(|(&d, (&s, &a))| d * layer.act.derivative(s, a))
                    .collect();
                let gl = &mut grads.layers[l];
                for (r, &dsr) in ds.iter().enumerate() {
                    gl.b[r] += dsr;
                    for (c, &below_c) in below.iter().enumerate() {
                        gl.w[r][c] += dsr * below_c;
                    }
                }
                if l > 0 {
                    let mut next = vec![0.0; layer.in_dim()];
                    for (r, &dsr) in ds.iter().enumerate() {
                        for (c, nc) in next.iter_mut().enumerate() {
                            *nc += layer.w[r][c] * dsr;
                        }
                    }
                    delta = next;
                }
            }
        }
        Ok(grads)
    }

    /// Serializes to the checkpoint JSON document.
    pub fn to_json(&self) -> String {
        let doc = CheckpointDoc {
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    w: l.w.clone(),
                    b: l.b.clone(),
                    act: l.act,
                })
                .collect(),
            split: self.split,
            h: self.feature_dim,
            classes: self.classes,
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
    }

    /// Parses and validates a checkpoint JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        let layers = doc
            .layers
            .into_iter()
            .map(|l| Layer {
                w: l.w,
                b: l.b,
                act: l.act,
            })
            .collect();
        let params = ModelParams::from_layers(layers, doc.split)?;
        if params.feature_dim != doc.h {
            return Err(ProcalError::ShapeMismatch(format!(
                "checkpoint declares h={} but layers produce {}",
                doc.h, params.feature_dim
            )));
        }
        if params.classes != doc.classes {
            return Err(ProcalError::ShapeMismatch(format!(
                "checkpoint declares C={} but final layer outputs {}",
                doc.classes, params.classes
            )));
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ModelParams::from_json(&text)
    }
}

struct ForwardTrace {
    input: Vec<f64>,
    pre_activations: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    layers: Vec<CheckpointLayer>,
    split: usize,
    h: usize,
    #[serde(rename = "C")]
    classes: usize,
}

/// Per-layer gradient slots, shape-congruent with a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerGrad {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientBuffer {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![vec![0.0; l.in_dim()]; l.out_dim()],
                    b: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().flatten().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite())
        })
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().flatten().all(|&v| v == 0.0) && l.b.iter().all(|&v| v == 0.0))
    }

    /// Reads gradient `idx` in the flat order matching
    /// [`ModelParams::get_param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            let in_dim = layer.w.first().map_or(0, Vec::len);
            let wn = layer.w.len() * in_dim;
            if idx < wn {
                return layer.w[idx / in_dim][idx % in_dim];
            }
            idx -= wn;
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("gradient index out of range");
    }

    fn congruent_with(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, p)| {
                g.b.len() == p.out_dim()
                    && g.w.len() == p.out_dim()
                    && g.w.iter().all(|row| row.len() == p.in_dim())
            })
    }
}

/// Momentum buffers and the two learning-rate groups (feature extractor
/// vs classifier head).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: GradientBuffer,
    pub lr_base: f64,
    pub lr_head: f64,
    pub momentum: f64,
    /// Multiplier applied to both group rates; the driver uses it for
    /// optional power decay. 1.0 means fixed rates.
    pub lr_scale: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr_base: f64, lr_head: f64, momentum: f64) -> Result<Self> {
        if lr_base <= 0.0 || lr_head < 0.0 {
            return Err(ProcalError::Parameter(format!(
                "learning rates must be positive (base {lr_base}, head {lr_head})"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ProcalError::Parameter(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(OptimizerState {
            velocity: GradientBuffer::zeros_like(params),
            lr_base,
            lr_head,
            momentum,
            lr_scale: 1.0,
        })
    }
}

/// One SGD-with-momentum update: `v <- m v + g`, `theta <- theta - lr v`,
/// with `lr` chosen per parameter group.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradientBuffer,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.congruent_with(params) {
        return Err(ProcalError::ShapeMismatch(
            "gradient buffer does not match parameter shapes".into(),
        ));
    }
    if !grads.all_finite() {
        return Err(ProcalError::divergence("non-finite gradient in sgd step", None));
    }
    let split = params.split;
    for (l, (layer, (g, v))) in params
        .layers
        .iter_mut()
        .zip(grads.layers.iter().zip(&mut state.velocity.layers))
        .enumerate()
    {
        let lr = if l < split { state.lr_base } else { state.lr_head } * state.lr_scale;
        for ((wrow, grow), vrow) in layer.w.iter_mut().zip(&g.w).zip(&mut v.w) {
            for ((w, &g), v) in wrow.iter_mut().zip(grow).zip(vrow) {
                *v = state.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        for ((b, &g), v) in layer.b.iter_mut().zip(&g.b).zip(&mut v.b) {
            *v = state.momentum * *v + g;
            *b -= lr * *v;
        }
    }
    Ok(())
}

/// Applies the softmax Jacobian `diag(p) - p p^T` to a probability-space
/// gradient, yielding the logit-space gradient.
///
/// The output always sums to zero: probability mass is conserved, so the
/// all-ones direction lies in the Jacobian's null space.
pub fn softmax_jacobian_vector_product(p: &ProbVector, dl_dp: &ScoreVector) -> Result<ScoreVector> {
    if p.len() != dl_dp.len() {
        return Err(ProcalError::ShapeMismatch(format!(
            "probability vector has {} entries, gradient has {}",
            p.len(),
            dl_dp.len()
        )));
    }
    let inner = crate::math::dot(p.as_slice(), dl_dp.as_slice());
    let out = p
        .as_slice()
        .iter()
        .zip(dl_dp.as_slice())
        .map(|(&pk, &gk)| pk * (gk - inner))
        .collect();
    ScoreVector::new(out)
}
