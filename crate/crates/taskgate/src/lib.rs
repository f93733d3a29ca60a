pub mod align;
pub mod config;
pub mod decoder;
pub mod error;
pub mod fdcheck;
pub mod flops;
pub mod mask;
pub mod model;
pub mod params;
pub mod sequence;
pub mod teachers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
