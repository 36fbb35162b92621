pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod correlation;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graphnet;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod trainer;
pub mod tte;

pub use error::{Error, Result};
