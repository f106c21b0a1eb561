//! Steerable filter frames, steering operators and dynamic steerable
//! two-factor network blocks, with a small reverse-mode engine to train them.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod frames;
pub mod group;
pub mod io;
pub mod metrics;
pub mod norm;
pub mod steering;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
