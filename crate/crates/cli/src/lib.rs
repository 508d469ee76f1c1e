//! Library surface of the experiment driver, exposed for integration tests.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use tpkd_core::error::Error;

/// Driver-level errors, mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    MissingArtifact(PathBuf),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::MissingArtifact(p) => {
                write!(f, "missing artifact: {} (run the prerequisite phase first)", p.display())
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 = config error, 3 = missing artifact, 4 = numerical divergence,
    /// 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact(_) => 3,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::BatchNotDivisible { .. }
                | Error::MalformedHeader(_)
                | Error::UnknownVersion { .. }
                | Error::LengthMismatch(_)
                | Error::WrongKind { .. } => 2,
                Error::Diverged { .. } => 4,
                Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
