//! Unsupervised deformable 2D image registration guided by latent
//! diffusion features.
//!
//! The crate provides the full pipeline: synthetic phantom generation,
//! a convolutional autoencoder to a quarter-resolution latent space, a
//! denoising diffusion model whose U-Net encoder doubles as a feature
//! extractor, a dual-stream window-attention registration network with
//! cross-attention fusion, differentiable warping with a hierarchical
//! pixel+latent loss, and Dice/Jacobian evaluation.

pub mod attention;
pub mod autoenc;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod regnet;
pub mod tensor;
pub mod warp;

pub use error::{CoreError, Result};
