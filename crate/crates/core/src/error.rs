use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: pair references unknown id {id:?}")]
    DanglingId { path: PathBuf, line: u64, id: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("vector length mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("embedding failed for pair ({left_id}, {right_id}): {message}")]
    Embed {
        left_id: String,
        right_id: String,
        message: String,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("demonstration {0} has no label")]
    UnlabeledDemo(usize),

    #[error("batch {batch_id}: completion failed after {attempts} attempt(s): {message}")]
    Backend {
        batch_id: usize,
        attempts: u32,
        message: String,
    },

    #[error("replay cache has no completion for prompt digest {digest}")]
    ReplayMiss { digest: String },

    #[error("{missing} selected demonstration(s) are unlabeled; run `batcher label {}` and retry", worklist.display())]
    LabelsMissing { missing: usize, worklist: PathBuf },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
