pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod structure;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
