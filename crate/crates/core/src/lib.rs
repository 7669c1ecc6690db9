pub mod autograd;
pub mod bench;
pub mod deploy;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod keypoints;
pub mod losses;
pub mod nas;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
