use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("template parse error at char {position}: {message}")]
    TemplateParse { position: usize, message: String },

    #[error("render error: {0}")]
    Render(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract conformance failure: {0}")]
    Conformance(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed(_) => "malformed",
            Error::Data(_) => "data",
            Error::InvalidArgument(_) => "argument",
            Error::TemplateParse { .. } => "template",
            Error::Render(_) => "render",
            Error::Config(_) => "config",
            Error::Conformance(_) => "conformance",
            Error::Divergence(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
