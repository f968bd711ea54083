use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },

    #[error("degenerate input to {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u16,
        found: u16,
    },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: u64,
        found: u64,
    },

    #[error("malformed file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("gradient check failed in {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category, used by the command-line front end to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. }
            | Error::Invalid { .. }
            | Error::Config(_)
            | Error::Dataset(_)
            | Error::Degenerate { .. } => ErrorKind::Validation,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::GradCheck(_) => ErrorKind::Numerical,
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. }
            | Error::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
