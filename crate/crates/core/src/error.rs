use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy. `Validation`-class errors mean the inputs can never work
/// (bad manifest, shape mismatch, invalid config); `Io`/`Runtime` mean the
/// attempt failed partway.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("row {row} has zero (or non-finite) norm; cannot normalize")]
    ZeroNormRow { row: usize },

    #[error("record stream invalid at line {line}: {message}")]
    Records { line: usize, message: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors that indicate invalid inputs rather than a failed attempt.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Runtime(_) | Error::Io { .. })
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
