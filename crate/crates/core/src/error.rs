use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the data forge and the evaluator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed record in an input file. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document {doc_id} has {sentences} sentence(s), at least 3 are required")]
    TooShortDocument { doc_id: String, sentences: usize },

    /// Malformed serialized sequence. `position` is a byte offset.
    #[error("parse error at byte {position}: {message}")]
    SequenceParse { position: usize, message: String },

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("unresolved placeholder {0}")]
    UnresolvedPlaceholder(String),

    #[error("turn index {index} out of range for dialogue with {len} turn(s)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("hypothesis/reference count mismatch: {hypotheses} vs {references}")]
    LengthMismatch {
        hypotheses: usize,
        references: usize,
    },

    #[error("BLEU needs at least one hypothesis/reference pair")]
    EmptyCorpus,

    #[error("no goal entry for dialogue {0:?}")]
    MissingGoal(String),

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data rather than usage or I/O.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Config(_))
    }
}
