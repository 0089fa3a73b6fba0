use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The CLI maps variants onto exit codes through [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported for this dataset: {0}")]
    Unsupported(String),

    #[error("time regression for node {node}: memory is at {current}, update requested at {requested}")]
    TimeRegression {
        node: usize,
        current: f64,
        requested: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used to pick a process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Unsupported,
    Runtime,
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Io { .. } => ErrorClass::Data,
            Error::Unsupported(_) => ErrorClass::Unsupported,
            _ => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
