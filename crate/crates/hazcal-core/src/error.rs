//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty risk set at event time {time}")]
    EmptyRiskSet { time: f64 },

    #[error("cohort contains no events of interest")]
    NoEvents,

    #[error("singular or ill-conditioned information matrix: {0}")]
    SingularInformation(String),

    #[error(
        "Cox fit did not converge after {iterations} iterations \
         (max |score| = {score_norm:.3e}, last beta = {last_beta:?})"
    )]
    CoxNonConvergence {
        iterations: usize,
        score_norm: f64,
        last_beta: Vec<f64>,
    },

    #[error(
        "constraint targets are infeasible: the targets lie outside the convex \
         hull of the constraint rows (violated direction {direction:?})"
    )]
    InfeasibleConstraint { direction: Vec<f64> },

    #[error(
        "empirical-likelihood dual solver did not converge after {iterations} \
         iterations (last gamma = {last_gamma:?})"
    )]
    ElNonConvergence {
        iterations: usize,
        last_gamma: Vec<f64>,
    },

    #[error("degenerate constraints: empirical E[Q_gamma_gamma] is singular")]
    DegenerateConstraints,

    #[error("target survival must lie in (0, 1]; got {value} at t = {time}")]
    InvalidSurvival { time: f64, value: f64 },

    #[error("covariance inconsistency: {0}")]
    CovarianceInconsistency(String),

    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("too many replicate failures: {failed} of {total} ({context})")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        context: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
