use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("rank error: expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("tensor is not on this tape")]
    NotOnTape,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate distribution: every entry of a softmax row is masked")]
    DegenerateDistribution,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint kind error: expected {expected}, found {found}")]
    Kind { expected: String, found: String },

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
