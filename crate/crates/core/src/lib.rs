//! Quantization-aware training of convolutional networks with k-bit weights
//! and activations.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode engine over dense CPU tensors;
//! - [`quant`]: the k-bit quantizers and their straight-through gradients;
//! - [`nn`]: declarative desk-scale models with guidance taps;
//! - [`data`]: MNIST / CIFAR-10 loaders and the mini-batch stream;
//! - [`strategies`]: two-stage, progressive and guided training, and their
//!   composition into experiment plans.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod quant;
pub mod strategies;

pub use error::{Error, Result};
