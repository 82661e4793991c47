use thiserror::Error;

/// Errors produced by the pipeline, grouped by how a caller should react.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters (bad rates, non-PSD covariance, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a contract (missing outcomes, unordered ages, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A numerical procedure failed (divergence, singular system, no events).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
