use hsib_models::ModelError;
use hsib_tensor::TensorError;
use thiserror::Error;

use crate::config::Method;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("{0} is an offline method and needs a pretrained teacher")]
    NoTeacher(Method),
    #[error("{method} needs at least {need} {what}, got {got}")]
    TooFew {
        method: Method,
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{method} does not support {what}")]
    Unsupported { method: Method, what: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<hsib_data::DataError> for DistillError {
    fn from(e: hsib_data::DataError) -> Self {
        DistillError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// Lets loss errors travel through `hsib_models::fit`.
pub(crate) fn to_model_error(e: DistillError) -> ModelError {
    match e {
        DistillError::Model(m) => m,
        DistillError::Tensor(t) => t.into(),
        other => ModelError::Step(other.to_string()),
    }
}
