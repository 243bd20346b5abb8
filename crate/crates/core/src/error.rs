//! Error taxonomy shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (shape/parameter mismatch, bad flag values).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or degenerate input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numeric failures during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
