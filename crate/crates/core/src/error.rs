use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the codec, trainer or CLI.
#[derive(Debug, Error)]
pub enum PctError {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch for `{name}`: expected {expected}, got {got}")]
    Dimension {
        name: String,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PctError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PctError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(name: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        PctError::Dimension {
            name: name.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code used by the `pct` binary.
    ///
    /// 2 = configuration, 3 = malformed input data, 4 = missing checkpoint,
    /// 1 = anything else (numeric failure during training, ...).
    pub fn exit_code(&self) -> i32 {
        match self {
            PctError::Config(_) => 2,
            PctError::MissingCheckpoint(_) => 4,
            PctError::Format(_)
            | PctError::Data(_)
            | PctError::Empty(_)
            | PctError::Lookup(_)
            | PctError::Checkpoint(_)
            | PctError::Size(_)
            | PctError::Dimension { .. }
            | PctError::Io { .. } => 3,
            PctError::Numeric(_) => 1,
        }
    }
}

pub type Result<T, E = PctError> = std::result::Result<T, E>;
