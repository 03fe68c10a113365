use std::path::PathBuf;
use tensor_core::{HvtError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HvError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Hvt(#[from] HvtError),
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },
    #[error("{path}:{line}: malformed manifest record: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("video {video_id}: invariant violation: {reason}")]
    Invariant { video_id: String, reason: String },
    #[error("video {video_id}: cannot sample episode: {reason}")]
    Sampling { video_id: String, reason: String },
    #[error("invalid configuration:\n  {}", errors.join("\n  "))]
    Config { errors: Vec<String> },
    #[error("non-finite {what} at step {step}")]
    NonFiniteTraining { what: String, step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, HvError>;
