//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by model, statistics, and pipeline operations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Input shape does not match what the operation expects.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A batch was too small to compute the requested statistic.
    #[error("batch of size {0} is too small: {1}")]
    BatchTooSmall(usize, &'static str),

    /// A covariance matrix was not positive semi-definite after jitter.
    #[error("covariance is not positive semi-definite after jitter (dim {0})")]
    NotPositiveDefinite(usize),

    /// A kernel bandwidth degenerated to zero (all-identical reference set).
    #[error("zero KDE bandwidth in dimension {0}: reference set is degenerate")]
    ZeroBandwidth(usize),

    /// A class id was not found where one was required.
    #[error("unknown class id {0}")]
    UnknownClass(usize),

    /// A loss or statistic became non-finite.
    #[error("non-finite value in stage '{stage}': {detail}")]
    NonFinite { stage: String, detail: String },

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A referenced dataset could not be found or read.
    #[error("dataset unavailable: {0}")]
    DatasetUnavailable(String),

    /// Checkpoint serialization or deserialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
