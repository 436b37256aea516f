//! Command-line pipeline: offline balancing, training, evaluation, heatmap
//! export and teacher serving, plus the seeded reference experiment.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod reference;
pub mod scorer;
pub mod train;

pub use config::{RunConfig, TeacherMode, TrainConfig};
pub use error::{HarnessError, Result};
pub use metrics::StepMetrics;
