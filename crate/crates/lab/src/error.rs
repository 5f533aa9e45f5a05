use std::path::PathBuf;

use lwf_core::LwfError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing input {path}: run `{producer}` first")]
    MissingInput { path: PathBuf, producer: &'static str },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] LwfError),
}

impl LabError {
    /// 1 for usage and config problems, 2 for runtime aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::MissingInput { .. } => 1,
            LabError::Core(LwfError::InvalidConfig(_) | LwfError::InvalidTask { .. }) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
