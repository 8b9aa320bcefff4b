//! Quantized diffusion models whose only trainable parameters are the
//! quantization scales.
//!
//! Integer weight codes are frozen after post-training quantization. Each
//! quantized layer computes its weight as `s_out[o] · (q − z)[o, i] · s_in[i]`
//! and a bank of such scale sets ("experts") is routed by denoising timestep.
//! Task adaptation then amounts to swapping a small file of scales over one
//! shared checkpoint.

pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod qlayers;
pub mod experts;
pub mod diffusion;
pub mod training;
pub mod analysis;
pub mod io;

pub use error::{Error, Result};
