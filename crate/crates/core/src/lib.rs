pub mod autoencoder;
pub mod dataset;
pub mod detector;
pub mod evaluation;
pub mod par;
pub mod preprocessing;
pub mod rng;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
