use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("parameter maps are not congruent: {0}")]
    Congruence(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
