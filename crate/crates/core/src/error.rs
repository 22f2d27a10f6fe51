use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("empty supervision: no position is selected by the loss mask")]
    EmptySupervision,

    #[error("target id {target} at position {position} is outside the vocabulary of size {vocab}")]
    Vocab {
        target: usize,
        position: usize,
        vocab: usize,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error on line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("schema error: triplet `{id}` is missing `{field}`")]
    TripletSchema { id: String, field: &'static str },

    #[error("duplicate triplet id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("capacity error: sample carries {media} media items, limit is {max}")]
    Capacity { media: usize, max: usize },

    #[error("sample of length {len} exceeds max_len {max_len}; refusing to truncate")]
    Truncation { len: usize, max_len: usize },

    #[error("length error: {0}")]
    Length(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("non-finite loss {loss} at step {step} (samples {samples:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        samples: Vec<usize>,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing image `{0}`")]
    MissingImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
