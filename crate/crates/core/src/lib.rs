pub mod checkpoint;
pub mod config;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
