//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (dimensions, rates, paths).
    #[error("invalid config: {0}")]
    Config(String),

    /// Structural violation: shape mismatch, asymmetric input, bad index.
    #[error("structural error: {0}")]
    Structure(String),

    /// Domain violation: operation applied outside its defined inputs
    /// (e.g. decay weight of a non-edge, unknown patient id).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input data, with the 1-based line it came from.
    #[error("ingest error at line {line}: {msg}")]
    Ingest { line: u64, msg: String },

    /// A NaN or infinity appeared where training math requires finiteness.
    #[error("non-finite {0} encountered")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
