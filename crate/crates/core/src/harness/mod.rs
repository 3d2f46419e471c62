//! Synthetic data, experiment plans and end-to-end runs.

pub mod data;
pub mod experiment;
pub mod plan;

pub use data::{gen_dataset, DataConfig, Dataset, SplitData};
pub use experiment::{run_experiment, sweep_dynamic, ExperimentOutcome, Sweep, TrainedSystem};
pub use plan::ExperimentPlan;
