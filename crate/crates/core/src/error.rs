use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while decoding one of the binary interchange formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("label block holds {found} labels, header declares {expected}")]
    LabelCountMismatch { expected: usize, found: usize },
    #[error("label block is not valid UTF-8")]
    InvalidUtf8,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Decode(#[from] FormatError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("unknown occupation {0:?}")]
    UnknownOccupation(String),
    #[error("unknown expert {0:?}")]
    UnknownExpert(String),
    #[error("occupations without any attribute label: {}", .0.join(", "))]
    EmptyOccupations(Vec<String>),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
