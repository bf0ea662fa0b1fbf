//! Experiment plumbing: configuration, scheme runners, sweeps and reports.

pub mod chart;
pub mod config;
pub mod report;
pub mod run;

pub use config::{parse_config, parse_config_str, render_config, ExperimentConfig, Scheme, Sweep, SweepParam};
pub use report::{emit_report, UtilityReport, UtilityRow};
pub use run::Runner;
