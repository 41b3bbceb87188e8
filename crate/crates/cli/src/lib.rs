//! Library half of the `ultra` binary: run configuration, the checkpoint
//! format, and the command implementations. The binary in `main.rs` is a
//! thin argument-parsing shell over [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod config;

/// Command failure, tagged with the process exit code it maps to.
///
/// 1 runtime, 2 configuration, 3 I/O or corrupt artifact, 4 non-finite
/// training loss, 5 unsupported format version.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NonFiniteLoss(String),
    #[error("{0}")]
    VersionMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonFiniteLoss(_) => 4,
            CliError::VersionMismatch(_) => 5,
        }
    }
}
