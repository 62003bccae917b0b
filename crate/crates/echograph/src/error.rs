//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes of the
/// pipeline: tensor shape algebra, numeric health, API contracts, run
/// configuration, on-disk formats and plain I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced NaN or Inf, or otherwise left the finite domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A file exists but its content does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
