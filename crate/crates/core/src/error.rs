use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("masked softmax: row {row} has an empty selection")]
    EmptySelection { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("gradient check: function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check: top-k margin {margin:e} is below the required {required:e}")]
    TieMargin { margin: f64, required: f64 },

    #[error("layer {layer} is not available (encoder depth {depth})")]
    InvalidLayer { layer: usize, depth: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("checkpoint: truncated file ({0})")]
    Truncated(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
