//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, corrupt header, or otherwise unreadable checkpoint bytes.
    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    /// File shorter (or longer) than the declared parameter count implies.
    #[error("checkpoint payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("iteration {t} does not advance past {last}; updates must be strictly increasing")]
    Ordering { t: u64, last: u64 },

    #[error("no iterate qualifies for averaging (t0={t0}, freq={freq})")]
    EmptyAverage { t0: u64, freq: u64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown domain '{0}'")]
    UnknownDomain(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },

    #[error("correlation undefined: {0}")]
    DegenerateInput(String),

    #[error("iteration grids differ across runs: {0}")]
    GridMismatch(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("finite-difference step eps={eps} produced non-finite values; try a different step")]
    FdStep { eps: f64 },

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
