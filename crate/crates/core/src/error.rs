//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad runtime input (non-finite values, empty batches, overlong sequences, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Inconsistent or unsatisfiable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operation not valid in the current state (e.g. double adapter attach).
    #[error("state error: {0}")]
    State(String),

    /// Training missed its accuracy bar within the step budget.
    #[error("convergence error: reached accuracy {final_accuracy:.4} (target {target:.4}) after {steps} steps")]
    Convergence {
        final_accuracy: f64,
        target: f64,
        steps: usize,
    },

    /// Per-fact world generation failed (fact is dropped and logged upstream).
    #[error("generation error: {0}")]
    Generation(String),

    /// Serialized artifact carries an unsupported version.
    #[error("version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// Serialized artifact is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
