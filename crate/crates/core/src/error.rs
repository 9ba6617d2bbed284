//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ProcalError>;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum ProcalError {
    /// An input violated a numeric contract (non-finite entries, broken
    /// simplex, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A feature vector was too close to zero to normalize or compare.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    /// Dimensions of two quantities do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A hyperparameter or index is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Too few samples to build the requested structure.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Source priors are write-once; a second write was attempted.
    #[error("source priors are already frozen")]
    PriorsAlreadyFrozen,

    /// Training produced non-finite values.
    #[error("numerical divergence: {message}")]
    Divergence {
        message: String,
        /// Iteration at which trouble was detected, if known.
        iteration: Option<u64>,
    },

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A feature table or config file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ProcalError {
    pub(crate) fn divergence(message: impl Into<String>, iteration: Option<u64>) -> Self {
        ProcalError::Divergence {
            message: message.into(),
            iteration,
        }
    }
}
