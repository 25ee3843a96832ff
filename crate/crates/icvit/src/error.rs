//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement (e.g. matmul inner dimensions).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument to an operation (bad channel id, empty mask, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model/data configuration inconsistency.
    #[error("config error: {0}")]
    Config(String),

    /// Violated call contract (non-scalar backward root, missing CLS, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward pass produced NaN or Inf.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed dataset or checkpoint bytes.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Underlying I/O failure, annotated with the path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
