pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synthdata;
pub mod optim;
pub mod config;
pub mod trainer;
pub mod evalsuite;
