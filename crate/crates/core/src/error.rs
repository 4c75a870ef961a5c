use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("non-finite value in {location} at index {index}")]
    NonFinite { location: String, index: usize },

    #[error("client {client} diverged in round {round}: {reason}")]
    Divergence {
        client: u16,
        round: usize,
        reason: String,
    },

    #[error("GZFL parse error at byte {offset}: {kind}")]
    Parse { offset: u64, kind: ParseErrorKind },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown participant id {0}")]
    UnknownParticipant(u16),

    #[error("participant {0} has no validation split")]
    MissingValidation(u16),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic([u8; 4]),
    UnsupportedVersion(u16),
    Truncated { expected: u32, actual: u32 },
    TrailingBytes(u64),
    InvalidSample { index: u32, reason: String },
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic(m) => write!(f, "bad magic {:02x?}, expected \"GZFL\"", m),
            ParseErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseErrorKind::Truncated { expected, actual } => {
                write!(f, "truncated: header declares {expected} samples, found {actual}")
            }
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after last sample"),
            ParseErrorKind::InvalidSample { index, reason } => {
                write!(f, "sample {index} invalid: {reason}")
            }
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            msg: msg.into(),
        }
    }
}
