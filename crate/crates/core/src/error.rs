use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cross-entropy over an empty position set")]
    EmptyPositions,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("token id {0} out of vocabulary")]
    UnknownId(u32),

    #[error("coordinate {0} outside [0, 100]")]
    CoordinateRange(i64),

    #[error("sample {id} is missing field {field}")]
    MissingField { id: String, field: &'static str },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("text length {len} exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("entry {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint entry sets differ: {0:?}")]
    NameMismatch(Vec<String>),

    #[error("non-finite loss at epoch {epoch} step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
