//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes and the op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity reached an op boundary.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Numeric failure outside plain shape/finiteness checks (bad loss rank,
    /// NaN gradients, failed gradient checks, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or usage.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
