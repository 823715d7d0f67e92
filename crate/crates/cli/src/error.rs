use defectgen_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    /// The checked content is bad (validation or metric failure).
    #[error("{0}")]
    Domain(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 0 success, 1 domain failure, 2 i/o or config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Domain(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Rules { .. } | CoreError::HashMismatch { .. } => 2,
                e if e.is_io() => 2,
                _ => 1,
            },
        }
    }
}
