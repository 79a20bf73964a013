use hsib_models::ModelError;
use hsib_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("clipping range is inverted: alpha {alpha} > beta {beta}")]
    InvertedRange { alpha: f64, beta: f64 },
    #[error("clipping range [{alpha}, {beta}] is not finite")]
    NonFiniteRange { alpha: f64, beta: f64 },
    #[error("bit width {0} outside 2..=16")]
    Bits(u32),
    #[error("range [{alpha}, {beta}] is degenerate even after widening")]
    Degenerate { alpha: f64, beta: f64 },
    #[error("static quantization needs calibration data")]
    NoCalibration,
    #[error("observer {0} has not seen any data")]
    Unobserved(String),
    #[error("accumulation depth {depth} could overflow i32 (max {max})")]
    Overflow { depth: usize, max: usize },
    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("bad quantized checkpoint: {0}")]
    Checkpoint(String),
}

impl From<hsib_data::DataError> for QuantError {
    fn from(e: hsib_data::DataError) -> Self {
        QuantError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, QuantError>;
