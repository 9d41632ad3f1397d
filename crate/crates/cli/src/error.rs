use std::path::{Path, PathBuf};

use grla_core::Error;
use thiserror::Error as ThisError;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFICATION_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const MISSING_ARTIFACT: u8 = 4;
    pub const DEGENERATE_REFERENCE: u8 = 5;
    pub const SHAPE: u8 = 6;
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Artifact { .. } => exit::MISSING_ARTIFACT,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::UnmappedSublabel(_) => exit::CONFIG,
                Error::Diverged { .. } => exit::DIVERGED,
                Error::DegenerateReference(_) => exit::DEGENERATE_REFERENCE,
                Error::Shape(_) | Error::Tensor(_) | Error::LabelOutOfRange { .. } | Error::InvalidDomainLabel { .. } => {
                    exit::SHAPE
                }
                _ => exit::MISSING_ARTIFACT,
            },
        }
    }

    pub fn artifact(path: &Path, message: impl Into<String>) -> Self {
        CliError::Artifact {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::artifact(path, e.to_string())
}
