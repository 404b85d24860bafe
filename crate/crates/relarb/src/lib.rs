//! Relative arbitrage and mean-field equilibria among competing investors.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arbitrage;
pub mod cli;
pub mod convergence;
pub mod engine;
pub mod error;
pub mod measure;
pub mod model;
pub mod mfg;
pub mod nash;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
