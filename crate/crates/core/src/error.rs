use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("singular value decomposition of a {rows}x{cols} matrix did not converge")]
    SvdNotConverged { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("inconsistent system: residual {residual:e} exceeds tolerance {tolerance:e}")]
    Inconsistent { residual: f64, tolerance: f64 },

    #[error("rank-deficient matrix: rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("algorithm failure: {0}")]
    AlgorithmFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
