use std::io;
use std::path::Path;

use nearid::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NON_FINITE: i32 = 4;
    pub const MISSING_SPLIT: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },

    #[error("{path}: {message}")]
    BadInput { path: String, message: String },

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub fn bad_input(path: &Path, message: impl ToString) -> Self {
        Self::BadInput { path: path.display().to_string(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } | CliError::BadInput { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::InvalidTemperature(_) | CoreError::InvalidSchedule { .. } => {
                    exit::CONFIG
                }
                CoreError::Io(_) | CoreError::Format(_) | CoreError::Json(_) => exit::IO,
                CoreError::NonFinite(_)
                | CoreError::NonFiniteLoss { .. }
                | CoreError::NonFiniteGradient { .. }
                | CoreError::Diverged { .. } => exit::NON_FINITE,
                CoreError::MissingSplit(_) => exit::MISSING_SPLIT,
                _ => exit::OTHER,
            },
        }
    }
}
