use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}: {detail}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
        detail: String,
    },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batchnorm in eval mode before running statistics were initialized")]
    UninitializedStats,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("layer {layer} ({kind}): {source}")]
    Layer {
        layer: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NumericAbort { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt file at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by input data or the filesystem rather than
    /// by configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Corrupt { .. } | Error::Image { .. } | Error::EmptyDataset
        )
    }

    /// True for non-finite values anywhere in a forward or backward pass.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::NumericAbort { .. } => true,
            Error::Layer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
