pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod physics;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
