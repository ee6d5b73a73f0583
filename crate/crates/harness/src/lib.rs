//! Experiment orchestration for warm-start flow matching: configs, the
//! two-phase training pipeline, solver sweeps, forecast ensembles, cost
//! accounting and reports.

pub mod config;
pub mod cost;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use cost::compute_rollout_cost;
