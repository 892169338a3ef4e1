use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Usage` maps to exit code 2 in the CLI (bad arguments, invalid configs,
/// failed manifest validation); everything else maps to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: expected {expected}, got {actual}")]
    Shape {
        node: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in `{context}`")]
    NonFinite { context: String },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
