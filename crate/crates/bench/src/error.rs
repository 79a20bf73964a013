use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    /// A config field failed validation.
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("cannot read config {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
    #[error("teacher checkpoint {0} does not exist")]
    MissingTeacher(PathBuf),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("latency probe: {0}")]
    Latency(String),
    #[error("empty report")]
    EmptyReport,
    #[error("invalid report row: {0}")]
    Row(String),
    #[error(transparent)]
    Data(#[from] hsib_data::DataError),
    #[error(transparent)]
    Model(#[from] hsib_models::ModelError),
    #[error(transparent)]
    Prune(#[from] hsib_prune::PruneError),
    #[error(transparent)]
    Quant(#[from] hsib_quant::QuantError),
    #[error(transparent)]
    Distill(#[from] hsib_distill::DistillError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        BenchError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
        let path = path.into();
        move |source| BenchError::Io { path, source }
    }

    /// Process exit code: 2 for usage and configuration problems, 1 for
    /// everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config { .. }
            | BenchError::ConfigFile { .. }
            | BenchError::ConfigParse { .. }
            | BenchError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
