pub mod attacks;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
