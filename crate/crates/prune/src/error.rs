use hsib_models::ModelError;
use hsib_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid prune target: {0}")]
    Target(String),
    #[error("invalid ranking: {0}")]
    Ranking(String),
    #[error("ThiNet needs at least {needed} calibration patches, got {got}")]
    Calibration { needed: usize, got: usize },
    #[error("network slimming needs batch norm after every conv layer")]
    NoBatchNorm,
    #[error("unknown fine-tuning strategy {0:?} (expected I, II or III)")]
    Strategy(String),
    #[error("unsupported model: {0}")]
    Unsupported(String),
}

impl From<hsib_data::DataError> for PruneError {
    fn from(e: hsib_data::DataError) -> Self {
        PruneError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PruneError>;
