//! Run layer behind the `anchor-contrast` binary: the JSON config, the
//! subcommands, and their exit-code contract.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_diagnose, cmd_gen_data, cmd_sweep_lr, cmd_train, cmd_verify};
pub use config::RunConfigFile;
pub use error::CliError;
