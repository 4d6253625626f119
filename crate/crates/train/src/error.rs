use thiserror::Error;

use crate::train::EpochRecord;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] netshrink::Error),

    #[error("invalid config: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("node `{node}` cannot be trained: {reason}")]
    Unsupported { node: String, reason: String },

    #[error("non-finite loss in epoch {epoch}; first non-finite value produced by `{node}`")]
    Diverged {
        epoch: usize,
        node: String,
        history: Vec<EpochRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl TrainError {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        TrainError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
