pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod overlay;
pub mod patches;
pub mod report;
pub mod schedule;
pub mod train;
pub mod triage;

pub use error::{Error, Result};
