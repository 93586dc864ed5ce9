pub mod analysis;
pub mod autograd;
pub mod cells;
pub mod config;
pub mod error;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
