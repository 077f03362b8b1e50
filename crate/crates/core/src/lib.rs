//! Attention-weighted multiple-instance regression of county yields from
//! bags of mixed coarse pixels, with a synthetic landscape to test it on.
//!
//! The guide in `book/` walks through the pieces; its code blocks run as
//! doctests of this crate.

// `!(x >= 0.0)` is how NaN gets rejected alongside the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod synthgeo;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/bags.md")]
    mod bags {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
