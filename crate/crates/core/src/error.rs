use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants fall into three families that the CLI maps onto distinct exit
/// codes: input problems, numerical failures and I/O failures.
#[derive(Debug, Error)]
pub enum AvError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown emotion label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<AvError>,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    Io,
}

impl AvError {
    pub fn input(msg: impl Into<String>) -> Self {
        AvError::Input(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        AvError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        AvError::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AvError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        AvError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        AvError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            AvError::Numerical(_) => ErrorKind::Numerical,
            AvError::Io { .. } => ErrorKind::Io,
            AvError::Csv(e) if e.is_io_error() => ErrorKind::Io,
            AvError::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Input,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvError>;
