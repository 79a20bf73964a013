//! Affine int8 quantization of the benchmark classifiers.
//!
//! Three modes share one integer inference path:
//!
//! * dynamic: FC weights int8, FC inputs quantized per batch, convs in f32;
//! * static: BN folded, every layer int8, activation ranges from a
//!   calibration pass;
//! * QAT: like static, but weights and ranges come out of training with
//!   fake quantization.
//!
//! Integer products accumulate in `i32`; biases stay in f32 and are added
//! after rescaling, before the output is requantized.

pub mod checkpoint;
pub mod convert;
pub mod error;
pub mod fold;
pub mod kernels;
pub mod model;
pub mod observer;
pub mod qat;
pub mod qparams;

pub use checkpoint::{load_quantized, save_quantized};
pub use convert::{assemble, calibrate, dynamic_quantize, new_observers, observe_batch, static_quantize, CalibConfig};
pub use error::{QuantError, Result};
pub use fold::fold_batch_norm;
pub use kernels::{affine_gemm, gemm_i32, MAX_DEPTH};
pub use model::{QLayer, QLayerKind, QWeight, QuantMode, QuantizedModel, BITS};
pub use observer::{Observer, ObserverRule};
pub use qat::{qat_train, QatConfig, QatModel, EMA_DECAY};
pub use qparams::{compute_qparams, minmax_qparams, quant_range, QParams, WIDEN_EPS};
