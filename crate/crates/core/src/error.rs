//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid caller-supplied data (labels out of range, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or otherwise broken numerics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk data (manifests, blobs, checkpoints).
    #[error("format error: {0}")]
    Format(String),

    /// A correlation is undefined because a column is constant.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
