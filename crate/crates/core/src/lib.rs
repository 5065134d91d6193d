//! Few-shot class-incremental learning with prototypical quadruplet training.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: vectors, dense matrices, symmetric square roots.
//! - [`extractor`]: the MLP embedding network, output head, freeze masks, SGD.
//! - [`bank`]: the calibrated prototype memory bank.
//! - [`sampler`]: session streams and episodic quadruplet sampling.
//! - [`trainer`]: base and incremental session training.
//! - [`eval`]: nearest-class-mean inference, accuracy matrices and reports.
//! - [`config`]: the JSON run configuration.
//!
//! The `book/` directory next to the workspace walks through each piece; its
//! code listings are compiled and run as doc-tests of this crate.

// `!(x > 0.0)` is how validation rejects NaN; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bank;
pub mod config;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod linalg;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/freezing.md")]
    mod freezing {}
    #[doc = include_str!("../../../book/src/bank.md")]
    mod bank {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
