use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverDidNotConverge { iterations: usize, residual: f64 },

    #[error("grid rejected: {unknowns} unknowns exceed the budget of {budget}")]
    MemoryBudget { unknowns: usize, budget: usize },

    #[error("Poisson truncation tail {tail:.3e} exceeds {threshold:.3e}; increase n_max (currently {n_max})")]
    TruncationTail { tail: f64, threshold: f64, n_max: usize },

    #[error("unconverged: {0}")]
    Unconverged(String),

    #[error("missing subset {0:?} in difference table")]
    MissingSubset(Vec<usize>),

    #[error("corrupt cache entry {path}: {reason}")]
    CorruptEntry { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
