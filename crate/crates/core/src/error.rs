use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("negative power at line {line}")]
    NegativePower { line: u64 },

    #[error("timestamps not strictly increasing at line {line}")]
    Ordering { line: u64 },

    #[error("unsupported resampling ratio: {from} s -> {to} s")]
    UnsupportedRatio { from: u32, to: u32 },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch in {layer}: expected {expected}, found {found}")]
    Dimension {
        layer: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("zero variance: cannot standardise with a zero standard deviation")]
    ZeroVariance,

    #[error("no data: {0}")]
    Empty(String),

    #[error("problem too large: {0}")]
    Guard(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("misaligned series: {0}")]
    Alignment(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(layer: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            layer: layer.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures of the numerics (divergence, NaN/Inf, degenerate variance)
    /// as opposed to bad input data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::ZeroVariance)
    }
}
