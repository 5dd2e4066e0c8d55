//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input data: bad cell values, missing columns, rows with
    /// holes. Carries enough context to point at the offending row.
    #[error("data: {0}")]
    Data(String),

    /// Structurally valid input that violates a precondition (dimension
    /// mismatch, empty batch, group count below two, unknown group id).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Bad configuration: out-of-range hyperparameter, inconsistent modes.
    #[error("config: {0}")]
    Config(String),

    /// A checkpoint file that is not ours, truncated, or version-skewed.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training aborted because a loss or gradient stopped being finite.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
