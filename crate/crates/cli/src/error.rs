use thiserror::Error;

/// Failures mapped onto the documented process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 config, 3 I/O, 4 stale artifact, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Stale(_) => 4,
            Self::Failed(_) => 1,
        }
    }
}

impl From<trajstitch::Error> for CliError {
    fn from(e: trajstitch::Error) -> Self {
        use trajstitch::Error as E;
        match e {
            E::Config(_) | E::InvalidMaze(_) | E::Shape(_) => Self::Config(e.to_string()),
            E::Io(_) | E::Json(_) | E::Version { .. } | E::Corrupt(_) => Self::Io(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
