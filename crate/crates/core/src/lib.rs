//! Riemannian Laplace approximations for small Bayesian neural networks.
//!
//! Gaussian Laplace samples are pushed along geodesics of the loss surface so
//! that they follow its curvature instead of leaving it on straight lines.

pub mod binfile;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod laplace;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod sampling;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    pub mod networks {}
    #[doc = include_str!("../../../book/src/loss.md")]
    pub mod loss {}
    #[doc = include_str!("../../../book/src/laplace.md")]
    pub mod laplace {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub mod sampling {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
