//! Action recognition on videos that carry a hidden secret video in their
//! wavelet coefficients.

pub mod autograd;
pub mod backbone;
pub mod band_attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod promotion;
pub mod rng;
pub mod rotary;
pub mod stego;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
