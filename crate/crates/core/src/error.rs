use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class count mismatch: model has {model} classes but the corpus needs {corpus}")]
    ClassCount { model: usize, corpus: usize },

    #[error("mode {mode} requires corpus field `{field}` (missing at record {record})")]
    MissingField {
        mode: String,
        field: &'static str,
        record: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated or corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, config implies {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool. `2` is reserved for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } | Error::Json(_) => 4,
            Error::Config(_) | Error::ClassCount { .. } | Error::MissingField { .. } => 5,
            Error::Input(_) | Error::Shape(_) => 6,
            Error::NonFinite(_) => 7,
            Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_)
            | Error::CheckpointShape { .. } => 8,
        }
    }
}
