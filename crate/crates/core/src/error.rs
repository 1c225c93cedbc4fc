//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("training diverged: loss is non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("dataset is empty or missing required labels: {0}")]
    EmptyDataset(String),

    #[error("no eligible records for metric `{0}`")]
    EmptyEligibleSet(&'static str),

    #[error("rejection sampling budget of {budget} draws exhausted for target label {target}")]
    RejectionBudget { budget: usize, target: String },

    #[error("missing upstream artifact for stage `{stage}`: run `{hint}` first")]
    MissingStage { stage: String, hint: String },

    #[error("checkpoint is corrupt: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }
}
