//! Numerical core for attention-derived pseudo-label refinement.
//!
//! The pipeline implemented here turns image-level supervision into dense
//! pseudo labels:
//!
//! 1. [`cam`] builds class activation maps from features and classifier
//!    weights and thresholds them into label maps.
//! 2. [`par`] refines activation maps with edge-aware kernels gathered over
//!    dilated 8-way neighbourhoods.
//! 3. [`attention`] runs a small multi-head self-attention forward pass and
//!    folds its score matrices into a symmetric affinity matrix.
//! 4. [`affinity`] derives windowed pairwise labels, scores the affinity
//!    matrix against them, and propagates activation maps by random walk.
//! 5. [`losses`] and [`eval`] carry the training objectives and the mIoU
//!    evaluator.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! the pipeline driver live in the `afa` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod affinity;
pub mod attention;
pub mod cam;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{LabelImage, RgbImage, BACKGROUND, IGNORE};
pub use tensor::Tensor;
