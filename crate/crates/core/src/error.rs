use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("Cholesky factorization failed ({0}); try a larger damping fraction")]
    Factorization(String),

    #[error("instance too large for exhaustive search: {states} states exceeds cap {cap}")]
    InstanceTooLarge { states: f64, cap: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                index,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping layer wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}
