use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation called outside its domain (empty class set, missing label, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numeric oracle produced a non-finite value.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
