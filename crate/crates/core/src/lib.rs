//! Multi-view consistent diffusion at desk scale.
//!
//! Coordinate-based noise initialization, Fourier-based attention over
//! non-overlapping view regions and a prompt cross-attention loss, built
//! on a small from-scratch U-Net denoiser with reverse-mode gradients,
//! plus the geometry, metrics and experiment harness around them.

pub mod attention;
pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod frequency;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod noise_init;
pub mod rng;
pub mod tensor;

pub use diffusion::{make_schedule, Schedule};
pub use error::{Error, Result};
pub use geometry::{make_view_ring, Correspondence, OverlapMask, ViewSet};
pub use noise_init::{NoiseBundle, NoiseMode};
pub use tensor::Tensor;
