//! Visual + landmark-graph lipreading with cross-attention fusion.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod visual;

pub use error::{Error, Result};
