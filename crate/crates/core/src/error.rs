use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("graph is disconnected ({components} components); islands are not supported")]
    Disconnected { components: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("eigen cache: {0}")]
    Cache(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("reference prior bracket is negative ({bracket:e}) at tau = {tau:e}")]
    DegeneratePrior { tau: f64, bracket: f64 },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("model {model}: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::InvalidGraph(_)
            | Error::Disconnected { .. }
            | Error::InvalidData(_)
            | Error::RankDeficient(_)
            | Error::Dimension(_)
            | Error::InvalidConfig(_)
            | Error::Cache(_) => true,
            Error::Model { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
