//! Word confusion network encoders for dialogue state tracking.

pub mod cli;
pub mod confnet;
pub mod datagen;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
