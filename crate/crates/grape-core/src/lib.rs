//! GRAPE: learning gene-level perturbation embeddings from single-cell
//! microscopy images with a style-transfer GAN.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`synthgen`] generates a synthetic optical-pooled-screening dataset with
//!   known gene-to-complex ground truth,
//! - [`preprocess`] implements flatfield correction, percentile rescaling,
//!   patch cropping and control-based z-scoring,
//! - [`model`] holds the networks (embedding matrix, mapping network, AdaIN
//!   generator, style encoder, multi-head discriminator),
//! - [`training`] implements the adversarial + R1 + cycle + style objectives
//!   and the optimizer loop,
//! - [`embeddings`] extracts gene representations and ingests baselines,
//! - [`eval`] scores embedding tables (mAP, purity, NMI, ARI, k-sweep).
//!
//! All differentiable computation runs on the tape in [`autodiff`].

pub mod autodiff;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};

/// Derive an independent 64-bit stream seed from a base seed and an index.
///
/// splitmix64 finalizer; used everywhere a sub-task (cell render, k-means
/// restart, training iteration) needs its own deterministic RNG.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
