//! Bayesian model trees for discrete choice.

pub mod binning;
pub mod choice;
pub mod data;
pub mod error;
pub mod evidence;
pub mod forecast;
pub mod mining;
mod optim;
pub mod rulelist;
pub mod sampler;
pub mod stats;
pub mod synth;
pub mod tree;

pub use error::{Error, Result};
