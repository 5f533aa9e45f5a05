//! Experiment pipeline on top of `lwf-core`: run configuration, on-disk
//! artifacts with manifests, the pipeline commands and the ablation sweep.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod protocol;
pub mod store;

pub use config::RunConfig;
pub use error::{LabError, Result};
pub use pipeline::{Lab, RunSpec};
