//! Command-line driver: synthetic data generation, backtests, single
//! estimates and input validation, all configured from one TOML file.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_backtest, cmd_estimate, cmd_synth, cmd_validate, BacktestSummary, ValidationReport};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
