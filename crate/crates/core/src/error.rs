use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("data integrity: {0}")]
    Integrity(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("cannot split dataset: {0}")]
    Split(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parseable class name, printed by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Integrity(_) => "integrity",
            Error::Alignment(_) => "alignment",
            Error::Split(_) => "split",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence(_) => "divergence",
            Error::Label { .. } => "label",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! cfg_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use cfg_err;
pub(crate) use dim_err;
