use std::io;
use std::path::PathBuf;

use crate::precision::Precision;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("precision unavailable: no {bits}-bit BatchNorm state in layer {layer} (available: {available})")]
    PrecisionUnavailable {
        bits: Precision,
        layer: usize,
        available: String,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
