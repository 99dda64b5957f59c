//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("starting block is zero")]
    ZeroStart,

    #[error("non-finite arithmetic in block Lanczos at iteration {iteration}")]
    LanczosBreakdown { iteration: usize },

    #[error("{what} did not converge within {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error(
        "Mercator series diverges (spectral radius estimate {radius:.3} >= 1); \
         increase the Nystrom rank"
    )]
    MercatorDivergence { radius: f64 },

    #[error("{what} = {value} exceeds cap {cap}; use the Krylov evaluator for large problems")]
    CapExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("{0} must be positive")]
    NonPositive(&'static str),

    #[error("matrix is not positive definite: {0}")]
    Indefinite(&'static str),

    #[error("eigendecomposition failed to converge")]
    EigFailure,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
