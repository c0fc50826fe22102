use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LasError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("cannot encode character {0:?}: not in the vocabulary")]
    Encoding(char),

    #[error("token {0} is not a valid vocabulary index here")]
    Token(usize),

    #[error("undefined error rate: reference transcript is empty")]
    EmptyReference,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite on batch [{utterances}]")]
    Diverged { step: u64, utterances: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LasError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        LasError::Format {
            what,
            detail: detail.into(),
        }
    }
}
