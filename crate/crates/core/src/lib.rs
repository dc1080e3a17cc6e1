#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod codebook;
pub mod conv;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod resample;
pub mod tensor;
pub mod textures;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
