use thiserror::Error;

/// Errors surfaced by the engine. Numeric aborts are kept separate from
/// ordinary I/O and shape errors so the CLI can map them to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{context}: value is not a scalar (numel {numel})")]
    NotScalar { context: &'static str, numel: usize },

    #[error("backward already ran on this tape; build a fresh tape instead")]
    BackwardTwice,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("numerical abort: {context} (loss {loss:.6e})")]
    NumericalAbort { context: String, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("empty mask for class {class}")]
    EmptyMask { class: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
