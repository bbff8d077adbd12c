pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod report;
pub mod stp;
pub mod types;

pub use config::{load_config, ExperimentConfig};
pub use error::{Error, Result};
