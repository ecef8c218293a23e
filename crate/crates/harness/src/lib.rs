//! Experiment harness for stochastic backpropagation: synthetic data,
//! training runs in every mode, audits and run comparison.

pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod similarity;
pub mod train;

pub use compare::{compare_runs, ComparisonRow};
pub use config::{ExperimentConfig, Mode, ModelFamily};
pub use data::{gen_synthetic_dataset, Dataset, DatasetSpec};
pub use error::{HarnessError, Result};
pub use train::{audit_grad, audit_memory, run_experiment, run_on, AnyModel, RunRecord};
