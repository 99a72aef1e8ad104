//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor shapes are inconsistent with what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of range or unknown.
    #[error("invalid config: {0}")]
    Config(String),

    /// Image decode/encode failure, naming the offending file where known.
    #[error("image error: {0}")]
    Image(String),

    /// Filesystem failure with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint archive could not be read back.
    #[error("checkpoint load error: {0}")]
    Load(String),

    /// The text encoder is unavailable or failed to produce an embedding.
    #[error("text encoder error: {0}")]
    Encoder(String),

    /// Training aborted (e.g. non-finite loss), carrying the step index.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    /// A class name could not be resolved in a classifier's label space.
    #[error("label mapping error: {0}")]
    Mapping(String),

    /// A preprocessing defense failed to run.
    #[error("defense error: {0}")]
    Defense(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
