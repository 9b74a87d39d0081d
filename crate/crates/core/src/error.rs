use thiserror::Error;

/// Errors surfaced by the public library API.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (empty input, bad label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shapes are inconsistent with what the operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An optimizer step was given parameters without a matching gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    /// A sub-model index refers outside the global parameter coordinates.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A configuration key is unknown, ambiguous, or holds an invalid value.
    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A binary input file (IDX or checkpoint) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}
