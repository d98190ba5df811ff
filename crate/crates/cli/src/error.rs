use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {artifact}: run `fatq {stage}` first")]
    MissingPrerequisite { stage: &'static str, artifact: PathBuf },
    #[error("conflicting flags: {0}")]
    FlagConflict(String),
    #[error(transparent)]
    Core(#[from] fat_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;
