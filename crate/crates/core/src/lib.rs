//! Semantic sketch conditioning for latent diffusion.
//!
//! A modulation network predicts per-element scale and shift maps that adjust
//! a frozen denoiser's noise prediction during the high-noise part of sampling.
//! Training supervises the denoiser's cross-attention with masks derived from a
//! sketch encoder.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod modnet;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod raster;
pub mod sketch;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
