pub mod classifier;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod image;
pub mod localize;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod soi;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
