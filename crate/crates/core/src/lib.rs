//! Human motion prediction with a DCT-encoded graph convolutional network,
//! an optional VAE branch used as a training-time regulariser, and an
//! out-of-distribution benchmark harness.

pub mod autodiff;
pub mod benchmark;
pub mod classifier;
pub mod data;
pub mod dct;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
