use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("backward pass requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient recording is disabled on this tape")]
    GradientsDisabled,

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("frozen parameters were modified: {0}")]
    FrozenMutated(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("outcome space too large: {0}")]
    OutcomeSpace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
