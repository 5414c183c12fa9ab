//! User-adaptive motion prediction toolkit.
//!
//! Trains next-step human action predictors that adapt to a new user from a
//! small support batch. The crate bundles the autodiff engine and model, the
//! meta-learning algorithms and baselines, a synthetic 2-D hockey interaction
//! simulator, a cross-validation experiment harness and embedding analysis
//! tools.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod data;
pub mod embed;
pub mod error;
pub mod exec;
pub mod harness;
pub mod meta;
pub mod model;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
