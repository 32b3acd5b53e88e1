//! Configuration, run orchestration, parameter sweeps and file output for
//! the `kwc` command-line tool.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_audit, cmd_constants, cmd_h_sweep, cmd_run, cmd_sigma_sweep, cmd_validate, RunOutcome,
};
pub use config::{parse_config, parse_config_str, RunConfig};
