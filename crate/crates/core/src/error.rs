use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("bad magic bytes {0:?}, expected \"LFTK\"")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDType(u32),

    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dtype mismatch: file holds {found}, caller expected {expected}")]
    DTypeMismatch { expected: &'static str, found: &'static str },

    #[error("{metric}: image {size:?} smaller than window {window}")]
    WindowTooLarge { metric: &'static str, size: (usize, usize), window: usize },

    #[error("{metric}: degenerate input ({msg})")]
    Degenerate { metric: &'static str, msg: String },

    #[error("output directory {0} exists and is not empty")]
    OutputNotEmpty(PathBuf),

    #[error("missing {what}: {detail}")]
    Missing { what: &'static str, detail: String },

    #[error("parse error at {location}: {msg}")]
    Parse { location: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
