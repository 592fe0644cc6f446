use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is detached: no recorded op leads to a parameter requiring gradients")]
    Detached,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: parameter `{param}` {detail}")]
    Incompatible { param: String, detail: String },

    #[error("target normalization statistics missing from checkpoint")]
    MissingStats,

    #[error("scalar regression head is disabled in this model")]
    HeadDisabled,

    #[error("degenerate target `{0}`: need at least two distinct training values")]
    DegenerateTarget(&'static str),

    #[error("record `{path}` has no {target} value, required by an enabled head")]
    MissingTarget { path: String, target: &'static str },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metrics: {0}")]
    Metrics(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
