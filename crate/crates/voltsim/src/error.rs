use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum VoltError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("arbitrage constraint violated: {0}")]
    Arbitrage(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("model artifact version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VoltError>;
