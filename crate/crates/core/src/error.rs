use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// The container is not a well-formed `GEOMTNSR` file.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree on size.
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is valid but the requested quantity is undefined for it
    /// (zero matrix, single sequence, all-zero basis, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }
}
