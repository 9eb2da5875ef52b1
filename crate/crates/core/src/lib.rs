//! Depth-only, open-set identification of individual animals.
//!
//! The pipeline runs top-down depth frames through [`segmentation`], turns
//! each animal crop into a point cloud with [`cloudops`], embeds clouds with
//! the max-pooled point network in [`embednet`], trains it with the metric
//! losses in [`losses`] via [`trainer`], and resolves identities with the kNN
//! gallery in [`openset`]. [`saliency`] explains predictions per point, and
//! [`synth`] generates a deterministic synthetic herd for testing.

pub mod cli;
pub mod cloudops;
pub mod config;
pub mod embednet;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod openset;
pub mod pipeline;
pub mod saliency;
pub mod segmentation;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use model::*;

// Book chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/clouds.md")]
    mod clouds {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/openset.md")]
    mod openset {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/real-data.md")]
    mod real_data {}
}
