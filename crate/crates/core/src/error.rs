use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("face {face} is near-degenerate: {msg}")]
    DegenerateFace { face: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("eigensolver did not converge: {0}")]
    Convergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config: {0}")]
    Config(String),
    #[error("binary format: {0}")]
    Format(String),
}

impl Error {
    /// Stable machine-parsable code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::InvalidMesh(_) => "E_MESH",
            Error::DegenerateFace { .. } => "E_DEGENERATE",
            Error::Dimension(_) => "E_DIM",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Convergence(_) => "E_CONVERGENCE",
            Error::Numerical(_) => "E_NUMERIC",
            Error::Config(_) => "E_CONFIG",
            Error::Format(_) => "E_FORMAT",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
