pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
