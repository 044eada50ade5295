pub mod actions;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod nn;
pub mod sampler;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
