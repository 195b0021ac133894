//! File formats, configuration and experiment orchestration around
//! `bcrl-core`.

pub mod certify;
pub mod config;
pub mod error;
pub mod experiment;
pub mod files;
pub mod plotdata;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, run_sweep, RunOutput, Stage, SweepAxis};
