//! Block-separable strong-FWER multiple testing.
//!
//! Hypotheses are grouped into blocks of three. Each block is decided by the
//! K=3 rule that maximizes average power subject to the three within-block
//! FWER constraints, and per-block levels are combined under a Bonferroni or
//! Šidák budget so that the global procedure controls the FWER strongly.
//!
//! Module map:
//!
//! - [`densities`]: alternative p-value densities and the Grenander estimator
//! - [`quadrature`]: node/weight grids on the ordered simplex
//! - [`k3solver`]: dual coordinate descent for the K=3 block rule
//! - [`allocation`]: value curves and equalized-marginal level allocation
//! - [`boost`]: the blockwise procedure and its plug-in variant
//! - [`baselines`]: stepwise, closed-testing and resampling competitors
//! - [`simharness`]: seeded Monte-Carlo experiments

// negated comparisons are how NaN gets rejected here
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod baselines;
pub mod boost;
pub mod densities;
mod error;
pub mod k3solver;
pub mod quadrature;
pub mod simharness;

pub use error::{Error, Result};
