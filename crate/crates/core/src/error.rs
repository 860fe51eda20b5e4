use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line of an input file could not be parsed or failed validation.
    #[error("{source_name}:{line}: {msg}")]
    Malformed {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("record {id}: span out of bounds ({span} for {len} tokens)")]
    SpanOutOfBounds { id: String, span: String, len: usize },

    #[error("record {id}: overlapping entity spans")]
    OverlappingSpans { id: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("record {0}: missing gold label")]
    MissingLabel(String),

    #[error("sentence {0}: cyclic head links")]
    CyclicHeads(String),

    #[error("sentence {id}: expected exactly one root, found {found}")]
    RootCount { id: String, found: usize },

    #[error("duplicate sentence id {0}")]
    DuplicateSentence(String),

    #[error("{0}: size mismatch")]
    SizeMismatch(String),

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("missing record for sentence {0}")]
    MissingRecord(String),

    /// Input data violates a documented invariant.
    #[error("{0}")]
    Invalid(String),

    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(source_name: impl Into<String>, line: usize, msg: impl ToString) -> Self {
        Error::Malformed {
            source_name: source_name.into(),
            line,
            msg: msg.to_string(),
        }
    }

    /// Process exit code for this error: 1 usage, 2 data/validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
