//! Learned compression of large point clouds: voxel partition followed by a
//! per-voxel graph neural network autoencoder.
//!
//! The guide in `book/` walks through each stage; its code samples run as
//! doc-tests of this crate.

pub mod autodiff;
pub mod baselines;
pub mod commands;
pub mod config;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pc_io;
pub mod synth;
pub mod trainer;
pub mod voxelize;

pub use error::{PctError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/voxels.md")]
    mod voxels {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
