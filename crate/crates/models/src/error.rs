use std::path::PathBuf;

use hsib_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] hsib_data::DataError),
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
    /// Failure inside a caller-supplied training step.
    #[error("training step failed: {0}")]
    Step(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint mismatch: {what} is {found} in the checkpoint but {expected} was expected")]
    Mismatch {
        what: &'static str,
        found: String,
        expected: String,
    },
    #[error("no dtype given for layer {0}")]
    MissingLayer(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
