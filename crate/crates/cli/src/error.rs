use steered_diffusion::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for anything caught before sampling starts, 2 afterwards.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags core errors with the phase they surfaced in.
pub(crate) trait Phase<T> {
    fn setup(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T> Phase<T> for steered_diffusion::Result<T> {
    fn setup(self) -> CliResult<T> {
        self.map_err(|e| CliError::Validation(e.to_string()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e: CoreError| CliError::Runtime(e.to_string()))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
