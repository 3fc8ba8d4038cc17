//! Command implementations behind the `iap` binary.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;

use iap_core::IapError;
use thiserror::Error;

pub use commands::run;
pub use config::{parse_config, parse_config_str, Command, KernelChoice, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] IapError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for resource-guard refusals, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(IapError::ResourceGuard(_)) => 3,
            _ => 1,
        }
    }
}
