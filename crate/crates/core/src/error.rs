use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A hyperparameter or argument is outside its valid range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared in an input or intermediate result.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An input is too close to a singular point (e.g. a zero-norm vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The call sequence or the data does not satisfy a protocol requirement.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Optimization diverged.
    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
