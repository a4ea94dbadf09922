use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Graph(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("cannot read {path}: {msg}")]
    Read { path: PathBuf, msg: String },

    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged in phase {phase}, epoch {epoch}: loss is not finite")]
    Diverged { phase: u8, epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
