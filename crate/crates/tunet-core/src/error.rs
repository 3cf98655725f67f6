use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid argument or configuration value (caller error).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Misuse of the autodiff tape (non-scalar loss, repeated backward, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// Malformed file contents (bad magic, truncation, version mismatch).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Operation not supported for the given model variant.
    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
