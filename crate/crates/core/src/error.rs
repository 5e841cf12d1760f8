use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the in-memory operations of this crate.
///
/// File-format problems with compiled models have their own type,
/// [`crate::compile::FormatError`], so callers can map them to distinct codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {value} at index {index} is not -1 or +1")]
    NotBipolar { index: usize, value: i64 },

    #[error("unknown architecture `{0}` (expected cnv, n-cnv or u-cnv)")]
    UnknownArch(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid folding for layer `{layer}`: {reason}")]
    Folding { layer: String, reason: String },

    #[error("class id {0} out of range")]
    ClassOutOfRange(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Format(#[from] crate::compile::FormatError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
