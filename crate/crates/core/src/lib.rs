//! Counterfactual explanations for a binary image classifier, produced by a
//! gradient-guided diffusion sampler that confines each edit to an adaptive
//! pixel mask.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`ndgrad`]), a synthetic dataset with known causal regions
//! ([`synthdata`]), the networks ([`models`]), the noise schedule and reverse
//! step ([`diffusion`]), the guidance loss ([`guidance`]), mask construction
//! ([`masks`]), the sampling loop ([`sampler`]), evaluation ([`metrics`]),
//! on-disk formats ([`persist`]) and the `maskdiff` command line ([`cli`]).

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod masks;
pub mod metrics;
pub mod models;
pub mod ndgrad;
pub mod persist;
pub mod rng;
pub mod sampler;
pub mod synthdata;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub mod pipeline {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    pub mod guidance {}
    #[doc = include_str!("../../../book/src/masks.md")]
    pub mod masks {}
    #[doc = include_str!("../../../book/src/sampler.md")]
    pub mod sampler {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
