use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("rotary embedding needs an even dimension, got {0}")]
    OddDimension(usize),

    #[error("row {row} has zero norm and cannot be L2-normalized")]
    DegenerateKey { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singular triangular system at row {0}")]
    SingularSolve(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, position: usize, vocab: usize },

    #[error("schedule covers {schedule} positions but the sequence has {sequence}")]
    ScheduleMismatch { schedule: usize, sequence: usize },

    #[error("mode plan covers {plan} positions but {needed} are required")]
    PlanTooShort { plan: usize, needed: usize },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}
