use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("bad magic {found:?}, expected \"HSIC1\"")]
    BadMagic { found: String },
    #[error("{what}: expected {expected} bytes, found {actual}")]
    ByteLength {
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite sample at band {band}, row {row}, col {col}")]
    NonFinite { band: usize, row: usize, col: usize },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("standardizer used before fit")]
    NotFitted,
    #[error("jacobi eigensolver did not converge within {sweeps} sweeps (off-diagonal {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("class {class} has {count} labeled pixel(s); both splits need at least 2")]
    ClassTooSmall { class: u16, count: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> DataError {
    DataError::Invalid {
        what,
        msg: msg.into(),
    }
}
