use std::path::PathBuf;

/// Errors raised anywhere in the ranking stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("uninitialized normalization statistics")]
    UninitializedStats,
    #[error("empty query")]
    EmptyQuery,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("unknown document id `{0}`")]
    UnknownDocId(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("hash mismatch: {what} (expected {expected:016x}, found {found:016x})")]
    HashMismatch {
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad input data rather than misuse.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::DuplicateDocId(_)
                | Error::UnknownDocId(_)
                | Error::EmptyCorpus
                | Error::EmptyQuery
                | Error::HashMismatch { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
