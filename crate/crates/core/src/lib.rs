//! Uncertainty estimation for question answering by sampling answers to
//! reformulated questions and measuring the entropy of their meaning clusters.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod hsc;
pub mod pipeline;
pub mod reformulator;
pub mod report;
pub mod sampler;
pub mod sweep;

pub use error::{Error, Result};
