use std::path::PathBuf;

use gtl_core::Error as CoreError;

/// Errors surfaced by the command-line pipeline. Each maps to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } | CliError::Json(_) => 3,
            CliError::Core(e) => match e {
                CoreError::NonFiniteLoss { .. } | CoreError::NonFiniteValue(_) => 4,
                CoreError::InvalidModelConfig(_)
                | CoreError::InvalidTrainConfig(_)
                | CoreError::InvalidContextCount(_)
                | CoreError::EmptyAxis(_)
                | CoreError::TemplateResource(_) => 2,
                _ => 3,
            },
        }
    }
}
