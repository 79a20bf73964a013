//! The three classifiers (MLP, CNN1D, CNN2D) and their lifecycle:
//! construction, parameter and memory accounting, training, evaluation and
//! checkpoints.

pub mod accounting;
pub mod arch;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod train;

pub use accounting::{count_params, estimate_memory, fc_int8_dtype, uniform_dtype, DtypeMap, ParamCount};
pub use arch::{ArchSpec, ModelKind};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, read_frame, save_checkpoint, write_frame, CheckpointMeta, Manifest, TensorEntry};
pub use error::{ModelError, Result};
pub use eval::{argmax, evaluate, rank_of, Metrics, MetricsAccumulator};
pub use graph::{BatchNorm, Conv, Dense, Forward, Layer, ModelGraph, Taps};
pub use train::{epoch_batches, fit, train, Batch, EpochRecord, History, OptimizerConfig, StepCtx, TrainConfig, Trainable};
