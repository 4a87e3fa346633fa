//! Scenario execution: configuration, the closed simulation loop, and
//! per-run metrics reports with ablation variants.
//!
//! A scenario is fully described by a [`config::ScenarioConfig`] (loadable
//! from TOML) and three seeds; [`run::run_scenario`] turns it into a
//! [`crate::metrics::RunLog`], and [`report::run_ablation_suite`] executes
//! the standard five-variant comparison (everything on, no active ROI, no
//! bias correction, each agent solo) over shared ground truth.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ConfigError, ScenarioConfig, Seeds};
pub use report::{run_ablation_suite, write_atomic, MetricsReport, Variant};
pub use run::{run_scenario, run_scenario_with_trace, RunOutput, ScenarioError};
