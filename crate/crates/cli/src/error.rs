use std::path::{Path, PathBuf};

/// Everything a command can fail with. Each variant maps to one exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] ktied_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Format(_) => 4,
            CliError::Core(ktied_core::Error::NonFiniteGradient { .. } | ktied_core::Error::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CliError::Format(msg.into())
    }
}
