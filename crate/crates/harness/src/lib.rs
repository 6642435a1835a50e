//! Experiment configuration and the stage-by-stage pipeline behind the
//! `clearcf` command.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{DatasetKind, ExperimentConfig, Scale};
pub use error::{HarnessError, Result};
pub use pipeline::Method;
