use std::path::PathBuf;

/// Failure classes of the harness, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("numeric failure: {0}")]
    Numeric(akd_core::Error),

    #[error("{0}")]
    Core(akd_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        CliError::Config(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<akd_core::Error> for CliError {
    fn from(e: akd_core::Error) -> Self {
        use akd_core::Error as E;
        match e {
            e if e.is_numeric() => CliError::Numeric(e),
            E::InvalidArgument { .. } => CliError::Config(e.to_string()),
            E::Checkpoint { .. } | E::Missing(_) => CliError::Missing(e.to_string()),
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::Missing(e.to_string()),
            e => CliError::Core(e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
