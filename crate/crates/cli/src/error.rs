use std::path::PathBuf;

use netshrink_train::TrainError;

pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_UNACHIEVABLE: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("target {target} not achievable; nearest achievable removed fraction {achieved:.6} (outputs written)")]
    Unachievable { target: f64, achieved: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: netshrink::Error,
    },

    #[error(transparent)]
    Core(#[from] netshrink::Error),

    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn core_code(e: &netshrink::Error) -> u8 {
    match e {
        netshrink::Error::Io(_) => EXIT_IO,
        netshrink::Error::NonFinite(_) => EXIT_VERIFICATION,
        _ => EXIT_CONFIG,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Unachievable { .. } => EXIT_UNACHIEVABLE,
            CliError::Io { .. } | CliError::Input { .. } => EXIT_IO,
            CliError::Core(e) => core_code(e),
            CliError::Train(e) => match e {
                TrainError::Core(e) => core_code(e),
                TrainError::Diverged { .. } => EXIT_VERIFICATION,
                TrainError::Io(_) => EXIT_IO,
                _ => EXIT_CONFIG,
            },
        }
    }
}
