//! Config-driven experiment runner for the `discover-core` optimizers.
//!
//! [`config`] parses and validates run configurations, [`suite`] executes the
//! `train`, `variance`, `verify-bound` and `sweep` subcommands, and
//! [`output`] / [`plot`] write the CSV, JSON and SVG artifacts.

pub mod config;
pub mod output;
pub mod plot;
pub mod presets;
pub mod suite;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig, Violation};
pub use suite::{run_suite, Outcome, Subcommand, SuiteError, Verdict};
