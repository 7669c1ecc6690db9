//! Command implementations behind the `featherpoint` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use featherpoint::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot read {}: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing { .. } => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Divergence { .. } | Error::NonFiniteGradient(_) => EXIT_DIVERGED,
                Error::InvalidSpec(_)
                | Error::NoSequences(_)
                | Error::Json(_)
                | Error::MalformedModel(_)
                | Error::VersionMismatch { .. }
                | Error::TruncatedPayload { .. }
                | Error::TruncatedFile { .. }
                | Error::ChecksumMismatch { .. }
                | Error::Io { .. } => EXIT_CONFIG,
                _ => EXIT_INTERNAL,
            },
        }
    }
}
