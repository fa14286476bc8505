use thiserror::Error;

/// Errors raised by system construction, stepping and ensemble runs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular or ill-conditioned matrix ({what}): condition number {condition:e}")]
    IllConditioned { what: &'static str, condition: f64 },

    #[error("operator-mode Milstein term needs a diffusion Jacobian and finite-difference fallback is disabled for `{0}`")]
    MissingJacobian(String),

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e}, tolerance {tolerance:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("singular Newton system at iteration {0}")]
    SingularNewton(usize),

    #[error("diffusion is rank deficient on its active rows (rank {rank} < {n} noise factors)")]
    RankDeficientDiffusion { rank: usize, n: usize },

    #[error("non-finite state{}", match step { Some(i) => format!(" at step {i}"), None => String::new() })]
    NonFinite { step: Option<usize> },

    #[error("path {path} blew up at step {step} ({scheme})")]
    BlowUp {
        path: usize,
        step: usize,
        scheme: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
