//! Dual-prompt latent diffusion audio generation.
//!
//! A text caption and a short sound-event reference clip are fused into a
//! style embedding that conditions a small latent diffusion model through
//! adaLN-Zero modulation. The crate also builds event-reference datasets from
//! timestamp-annotated audio and computes objective evaluation metrics.

pub mod adapter;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
