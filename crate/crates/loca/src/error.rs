use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LocaError {
    #[error("config: {0}")]
    Config(String),

    #[error("tensor: {0}")]
    Tensor(#[from] loca_tensor::TensorError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("scene {id}: {msg}")]
    InvalidScene { id: u64, msg: String },

    #[error("generator: {0}")]
    Infeasible(String),

    #[error("training: {0}")]
    Train(String),

    #[error("non-finite loss: first produced by op `{op}`")]
    NonFiniteLoss { op: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl LocaError {
    pub fn config(msg: impl Into<String>) -> Self {
        LocaError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LocaError::Io { path: path.into(), source }
    }
}
