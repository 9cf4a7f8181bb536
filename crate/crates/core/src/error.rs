use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite {what} at step {step}")]
    Diverged { step: u64, what: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("spatial size {size} at mesh level {level} is below the model minimum {min}")]
    TooCoarse { level: usize, size: usize, min: usize },

    #[error("malformed raster at byte {offset}: {msg}")]
    Raster { offset: usize, msg: String },

    #[error("malformed checkpoint (line {line}): {msg}")]
    Checkpoint { line: usize, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
