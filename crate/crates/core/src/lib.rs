//! Gated linear-recurrent autoregressive model for 8-bit quantized raw audio.

pub mod audio;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod nn;
pub mod scan;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
