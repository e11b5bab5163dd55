//! Command-line driver and file formats for `afa-core`: the `.ten` tensor
//! container, Netpbm images, a synthetic scene generator, the gradient-check
//! harness and the end-to-end pipeline.

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod pipeline;
pub mod pnm;
pub mod synth;

pub use error::FormatError;
