//! Scenario-driven front end for `ionctl-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod output;
pub mod run;

pub use config::{ConfigError, Mode, ScenarioConfig};
pub use run::{run, RunError, RunSummary};
