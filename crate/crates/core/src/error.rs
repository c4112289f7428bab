use thiserror::Error;

/// Errors produced by the engine, quantizer, pipeline and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A layer received inputs or parameters of the wrong shape.
    #[error("layer `{layer}`: {msg}")]
    Structural { layer: String, msg: String },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    /// An operation was called out of order (e.g. backward without a recorded forward).
    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    /// Malformed container file; `offset` is the byte offset where decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn structural(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Structural {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
