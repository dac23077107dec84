//! Video virtual try-on with a spatio-temporal diffusion transformer.
//!
//! The denoiser works on latent video tokens and is conditioned by a garment
//! extractor (attention fusion inside spatial attention) and an identity
//! control network (zero-initialized residuals). Long videos are produced by
//! interpolated auto-regressive inference over key frames.

pub mod cli;
pub mod codec;
pub mod condition;
pub mod config;
pub mod controlnet;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod garment;
pub mod iar;
pub mod io;
pub mod metrics;
pub mod params;
pub mod stack;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
