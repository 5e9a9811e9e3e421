use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus not found: {0}")]
    CorpusNotFound(PathBuf),

    #[error("malformed corpus at {path}: {reason}")]
    MalformedCorpus { path: PathBuf, reason: String },

    #[error("glyph rendering produced an empty footprint")]
    DegenerateRender,

    #[error("invalid clutter level {0} (must be >= 2)")]
    InvalidLevel(usize),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("no candidate to choose from")]
    NoCandidate,

    #[error("mask is empty")]
    EmptyMask,

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt dataset at record {record}: {reason}")]
    CorruptDataset { record: u64, reason: String },

    #[error("incompatible checkpoint: {}", .0.join("; "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error("sample {index}: {source}")]
    AtSample {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
