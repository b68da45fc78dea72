//! Experiment plumbing for `rcd`: configuration files, the subcommands,
//! results tables and the identity check battery.

pub mod check;
pub mod commands;
pub mod config;
pub mod error;
pub mod results;

pub use commands::{Axis, Method, Planner};
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use results::ResultsRecord;
