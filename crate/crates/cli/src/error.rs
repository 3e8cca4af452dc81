use dualwalk::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 2 config, 3 artifact, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Artifact(_) => 3,
            Self::Core(e) => match e {
                CoreError::Numeric(_) => 4,
                CoreError::InvalidArgument(_) | CoreError::UnknownToken { .. } => 2,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
