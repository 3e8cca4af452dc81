use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed triple line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("training split is empty")]
    EmptyTrainSplit,

    #[error("unknown {kind} `{token}`")]
    UnknownToken { kind: &'static str, token: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("illegal action index {index} (only {available} available)")]
    IllegalAction { index: usize, available: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
