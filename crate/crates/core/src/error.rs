//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated. The message
    /// names the offending field or argument.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor / vector shape disagreement.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numeric quantity that must be finite was not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted; carries a diagnostic of the offending step/batch.
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    /// Checkpoint or manifest file could not be parsed.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    /// The configured backbone needs to be supplied by the caller.
    #[error("encoder kind `pluggable` requires an explicit backbone; register one via ModelBuilder::with_backbone")]
    PluggableBackbone,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}
