use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("rejected record {index}: non-finite value")]
    NonFinite { index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: String, expected: usize, got: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension { context: context.into(), expected, got }
    }

    /// Short stable tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::Contract(_) => "contract",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
