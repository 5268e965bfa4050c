pub mod codec;
pub mod error;
pub mod evaluator;
pub mod evolution;
pub mod objective;
pub mod quantizer;
pub mod search_space;
pub mod tensor_model;
mod wire;

pub use error::{Error, Result};
