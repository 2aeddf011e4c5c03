//! Separator-packed autoregressive pretraining for a causal state-space
//! vision encoder.

// Kernels index several buffers by the same counter.
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod config;
pub mod decoder;
pub mod error;
pub mod image;
pub mod model;
pub mod objective;
pub mod params;
pub mod patching;
pub mod registry;
pub mod separator;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod verify;

pub use config::Config;
pub use error::{Result, StarError};
pub use image::Image;
pub use tensor::{Matrix, Real};
