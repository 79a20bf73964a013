//! Experiment runner for the hyperspectral compression benchmark.
//!
//! A run is described by a JSON [`ExperimentConfig`]: dataset, split,
//! preprocessing, model, compression method and training budget. The
//! [`runner`] turns it into checkpoints, a `rows.csv` and a manifest;
//! [`report`] merges rows into CSV or markdown tables; [`tables`] holds the
//! matrices behind each results table.

pub mod cli;
pub mod config;
pub mod error;
pub mod latency;
pub mod report;
pub mod runner;
pub mod tables;

pub use config::{ExperimentConfig, MethodId, PruneMethod, SplitConfig, SplitKind, SCHEMA_VERSION};
pub use error::{BenchError, Result};
pub use latency::{measure_latency, Classifier, LatencyStats};
pub use report::{emit_report, Format, ReportRow, CSV_HEADER};
pub use runner::{evaluate_checkpoint, run_experiment, run_many, RunManifest, RunOutput};
pub use tables::{param_table, reproduce_table, width_table, ReproduceOptions};
