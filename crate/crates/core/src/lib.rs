//! Collision warning pipeline for a single unregulated intersection: traffic
//! generation, trajectory and interval prediction, pair classification,
//! alarm filtering and braking evaluation.

pub mod avoidance;
pub mod benchmarks;
pub mod classifier;
pub mod detection;
pub mod error;
pub mod features;
pub mod forecast;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod predictor;
pub mod uncertainty;
pub mod world;

pub use error::{Error, Result};
