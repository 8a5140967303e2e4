use thiserror::Error;

/// Failures of a subcommand, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    #[error("{0}")]
    Invalid(String),
    /// Anything that went wrong after the inputs were accepted (exit 1).
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

pub fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

pub fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

pub type CliResult<T> = Result<T, CliError>;
