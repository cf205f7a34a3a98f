pub mod adapter;
pub mod config;
pub mod data;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
