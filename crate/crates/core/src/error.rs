use std::path::PathBuf;

use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("{op}: expected {expected} channels, got {actual}")]
    ChannelMismatch { op: &'static str, expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar root, got shape {0}")]
    NonScalarRoot(Shape),

    #[error("parameter `{0}` is missing")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {actual}, expected {expected}")]
    ParameterShape { name: String, expected: Shape, actual: Shape },

    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("unsupported scale factor {0} (expected 2, 3 or 4)")]
    UnsupportedScale(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: u64, loss: f64 },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
