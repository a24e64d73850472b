//! Experiment runner for rectified-flow models: configs, pipelines,
//! artifacts and plots on top of `reflow-core`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod parallel;
pub mod pipelines;
pub mod plot;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use pipelines::{Env, RunOutput};
