use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why an EMB1 container could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("bad magic bytes {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated header: need {needed} bytes, {available} available")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("truncated payload for tensor `{tensor}`: need {needed} bytes, {available} available")]
    TruncatedPayload {
        tensor: String,
        needed: usize,
        available: usize,
    },
    #[error("{trailing} trailing bytes after last tensor")]
    TrailingBytes { trailing: usize },
    #[error("dimension inconsistency: {0}")]
    Dimensions(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("parse error at byte offset {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("insufficient item pool: {0}")]
    InsufficientPool(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Divergence { .. })
    }

    /// True for errors caused by unreadable, malformed or insufficient data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema { .. }
                | Error::MissingTensor(_)
                | Error::InsufficientPool(_)
                | Error::Io { .. }
                | Error::UndefinedMetric(_)
        )
    }
}
