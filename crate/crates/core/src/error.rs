use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("duplicate id {id:?} (lines {first} and {second})")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("text contains reserved marker {marker:?}")]
    MarkerCollision { marker: String },

    #[error("marker {0:?} is not a special token of this vocabulary")]
    UnknownMarker(String),

    #[error("word {word:?} at [{start}, {end}) has no overlapping word on the other side")]
    Unaligned {
        word: String,
        start: usize,
        end: usize,
    },

    #[error("length mismatch: {what} (expected {expected}, got {actual})")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("token {0} is not covered by any word")]
    UncoveredToken(usize),

    #[error("invalid feature data: {0}")]
    Feature(String),

    #[error("word lists diverge at index {index}: expected {expected:?}, found {found:?}")]
    WordMismatch {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            line,
            message: message.into(),
        }
    }
}
