//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("invalid sequence layout: {0}")]
    InvalidLayout(String),

    #[error("position {pos} out of range for sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },

    #[error("token id {0} outside vocabulary of size {1}")]
    UnknownToken(usize, usize),

    #[error("task index {0} out of range ({1} tasks)")]
    InvalidTaskIndex(usize, usize),

    #[error("unknown task name: {0}")]
    UnknownTask(String),

    #[error("no supervised positions in text block")]
    EmptySupervision,

    #[error("attention weights were not retained on this forward pass")]
    AttentionNotRetained,

    #[error("zero-norm pooled vector in cosine similarity")]
    ZeroNorm,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: usize, term: String },

    #[error("strategy {0} requires at least one query group")]
    StrategyNeedsQueries(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}
