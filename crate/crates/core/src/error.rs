//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset or configuration failed a consistency check.
    #[error("validation error: {0}")]
    Validation(String),

    /// A manifest row could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// A metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A checkpoint file failed its checksum or is truncated.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// A checkpoint was written with an incompatible schema version.
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    VersionedFormat { expected: u32, found: u32 },

    /// Training produced a non-finite loss.
    #[error("non-finite loss ({loss}) at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
