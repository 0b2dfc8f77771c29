//! Depth-guided texture diffusion as a set of verifiable numerical kernels.
//!
//! The pipeline extracts a high-frequency texture map from an RGB image
//! ([`texture`]), diffuses it through a depth latent with per-pixel normalized
//! kernels ([`diffusion`]), scores structural agreement with SSIM
//! ([`consistency`]), and injects the fused RGB-D embedding into a host
//! segmentation network ([`fusion`], [`model`]). [`metrics`] scores predictions
//! and [`grad`] holds gradient checks, the optimizer and the toy training loop.

pub mod consistency;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod texture;

pub use error::{Error, Result};
