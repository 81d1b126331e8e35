//! Bias-adjusted standardization of multi-channel images under Gaussian
//! mixture models.
//!
//! Observations are modelled by a (possibly spatially weighted) Gaussian
//! mixture. Each voxel is mapped to a score that is standard normal when the
//! mixture is correct, using estimated class memberships in place of the
//! unknown labels. The crate provides the transforms, the exact null
//! distribution of the hard-assignment score in the two-class univariate
//! case, Monte Carlo measures of tail inflation, plain and robust EM fitting,
//! and a synthetic image generator for calibration studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod error;
pub mod fit;
pub mod io;
pub mod mixture;
pub mod rng;
pub mod spdcore;
pub mod studies;
pub mod synth;
pub mod tailmc;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/null-distribution.md")]
    mod null_distribution {}
    #[doc = include_str!("../../../book/src/tail-inflation.md")]
    mod tail_inflation {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
}
