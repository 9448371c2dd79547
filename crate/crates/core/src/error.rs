use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point {index} ({x}, {y}, {z}) lies outside the unit cube [0,1)^3")]
    NotNormalized { index: usize, x: f64, y: f64, z: f64 },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("depth {depth} out of range 1..={max}")]
    DepthOutOfRange { depth: u32, max: u32 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rate/loss table mismatch: {0}")]
    TableMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("cache corrupt: {0}")]
    CacheCorrupt(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model file corrupt: {0}")]
    CorruptModel(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
