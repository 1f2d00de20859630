use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lowbit::Error),

    #[error("{0}")]
    Usage(String),

    #[error("config {origin}: {msg}")]
    Config { origin: String, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint {path} holds model `{found}` but the config describes `{expected}` (spec hash mismatch)")]
    SpecMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("dataset not found under {path}: {source}")]
    MissingDataset {
        path: PathBuf,
        #[source]
        source: lowbit::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
