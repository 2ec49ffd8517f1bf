//! Crate-wide error type.

use crate::solver::PowerFlowSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bus {bus} is unreachable from the reference bus over closed branches")]
    DisconnectedNetwork { bus: usize },

    #[error("branch {index} ({from}-{to}): {reason}")]
    InvalidBranch {
        index: usize,
        from: usize,
        to: usize,
        reason: String,
    },

    #[error("branch {index} is not a switch")]
    NotASwitch { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular Jacobian at iteration {iteration} (islanded bus or all-zero droop column?)")]
    SingularJacobian { iteration: usize },

    /// Carries the partial solution so telemetry survives a failed run.
    #[error("no convergence after {} iterations (last max mismatch {:.3e})",
            .0.iterations, .0.residual_history.last().copied().unwrap_or(f64::NAN))]
    NotConverged(Box<PowerFlowSolution>),

    #[error("case has no DER bus")]
    NoDer,

    #[error("no leader designated (required for rps/st modes)")]
    NoLeader,

    #[error("no solution: load beyond deliverability limit")]
    NoSolution,

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("validation failed [{rule}]: {detail}")]
    Validation { rule: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(rule: &str, detail: impl Into<String>) -> Self {
        Error::Validation {
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}
