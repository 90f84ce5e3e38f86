use lgcav_core::{Error, ErrorClass};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Every problem found in the run config.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    /// 2 for configuration problems, 3 for bad data, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
            CliError::Output { .. } => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
