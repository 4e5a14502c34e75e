use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FluxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FluxError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: normalized axis has length {len}, need at least 2")]
    DegenerateAxis { op: &'static str, len: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Domain(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed weight container: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FluxError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        FluxError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FluxError::Io {
            path: path.into(),
            source,
        }
    }
}
