pub mod checkpoint;
pub mod datagen;
pub mod dmtlr;
pub mod featurizer;
pub mod error;
pub mod fft;
pub mod harness;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
