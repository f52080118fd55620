use thiserror::Error;

/// Errors surfaced by the recovery library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsrError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no feasible design point; binding constraint: {binding}")]
    Infeasible { binding: String },
    #[error("numerical accuracy not reached: {0}")]
    Accuracy(String),
    #[error("AMP diverged at iteration {iteration}: tau2 = {tau2:.4e} (start {start:.4e})")]
    Divergence {
        iteration: usize,
        tau2: f64,
        start: f64,
    },
    #[error("target D = {target} not reached; best D = {best_d} at L = {best_l}")]
    TargetUnreachable { target: f64, best_d: f64, best_l: usize },
    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, AsrError>;
