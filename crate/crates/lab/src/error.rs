use std::path::PathBuf;

/// Errors of the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A configuration key is missing, unknown, mistyped or out of range.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    /// A configuration is well formed but combines incompatible settings.
    #[error("incompatible settings: {0}")]
    Combination(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Log { path: PathBuf, message: String },
    #[error("unsupported log schema version {found} in {path}")]
    Schema { path: PathBuf, found: String },
    #[error(transparent)]
    Core(#[from] vexp_core::error::Error),
    #[error("{0}")]
    Usage(String),
}

impl LabError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Problems with what the user asked for, as opposed to a run going
    /// wrong.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            LabError::Config { .. }
                | LabError::Combination(_)
                | LabError::Parse(_)
                | LabError::Usage(_)
        )
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
