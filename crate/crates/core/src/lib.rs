//! ProCal: neighborhood-guided source-free domain adaptation with
//! dual-model probability calibration.
//!
//! The crate is organized around the adaptation pipeline:
//!
//! - [`math`] - simplex vectors, softmax, normalization, similarity.
//! - [`model`] - a small differentiable MLP classifier with analytic
//!   reverse-mode gradients, SGD-with-momentum updates, and JSON
//!   checkpoints.
//! - [`memory_bank`] - per-sample cache of features, predictions, and
//!   frozen source priors with exact top-k cosine retrieval.
//! - [`objectives`] - calibrated soft-supervision + diversity losses and
//!   the information-maximization / attract-disperse baselines.
//! - [`theory`] - executable oracles for the soft-loss gradient, the
//!   update map, and the closed-form fixed point on the simplex.
//! - [`data`] - synthetic Gaussian domain pairs, feature-table I/O, and
//!   source-prior corruption.
//! - [`adaptation`] - source pretraining and the target adaptation loop
//!   with decay schedules, ablation variants, and dynamics logging.
//! - [`metrics`] - accuracy, source-knowledge forgetting rate, and
//!   incorrect-supervision rates.
//! - [`oracles`] - runtime verification suites (finite differences,
//!   fixed-point algebra, k-NN equivalence) shared by tests and the CLI.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod math;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracles;
pub mod theory;

pub use error::{ProcalError, Result};
