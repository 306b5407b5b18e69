use std::path::PathBuf;

/// Errors surfaced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("vocabulary too small: {count} tokens (need at least 2)")]
    VocabTooSmall { count: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },

    #[error("cannot normalize zero vector")]
    NormalizeZeroVector,

    #[error("cannot encode empty input")]
    EmptyInput,

    #[error("batch instance {index} ({role}): cannot encode empty input")]
    EmptyBatchInstance { index: usize, role: &'static str },

    #[error("non-finite value in score matrix")]
    NonFiniteScore,

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("duplicate document id {id:?}")]
    DuplicateDocId { id: String },

    /// Binary format violations carry the byte offset of the failure.
    #[error("{path}: byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Text format violations carry the line number of the failure.
    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("paired t-test needs at least 2 paired values, got {n}")]
    NotEnoughSamples { n: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        source_name: impl Into<String>,
        line: usize,
        reason: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
