use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("invalid genotype: {}", .0.join("; "))]
    InvalidGenotype(Vec<String>),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("latency table has no entry for {0}")]
    MissingLatency(String),
    #[error("profiling backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("latency budget {budget:.3} us infeasible after {attempts} rejected samples")]
    InfeasibleBudget { budget: f64, attempts: usize },
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
