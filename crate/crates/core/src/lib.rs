//! Retrieval-augmented forecasting with continuation proxies.
//!
//! A library of history/continuation pairs is cut from the training split.
//! For each query window the most correlated histories are retrieved, their
//! continuation descriptors are fused into a proxy of the window's own future
//! continuation, and that proxy is fed to a decomposition-linear forecaster
//! through a gated residual fusion layer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod continuation;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod library;
pub mod pipeline;
pub mod search;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/continuation.md")]
    mod continuation {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
