use thiserror::Error;

/// Errors produced by the guidance engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// An attention map with no positive mass where one is required.
    #[error("degenerate attention map: {0}")]
    DegenerateMap(String),

    #[error("degenerate mask for subject {subject}: empty")]
    DegenerateMask { subject: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed exchange tensor bytes.
    #[error("malformed tensor: {0}")]
    Format(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
