//! Gradient estimators for mixture-of-experts routing under per-expert
//! capacity limits.
//!
//! Hard capacity limits make expert assignments interdependent: when more
//! datapoints prefer an expert than it can serve, some must be dropped or
//! re-routed, and naive REINFORCE gradients through the router become
//! biased. This crate implements three correction strategies and the
//! machinery to validate them:
//!
//! - skip-with-reweighting: sample routes independently, drop overflow
//!   uniformly, and reweight survivors so the router gradient stays unbiased;
//! - balanced assignment sampling: perturb logits with Gumbel noise and
//!   solve a capacity-constrained matching, with per-datapoint conditional
//!   proposal probabilities for importance weighting;
//! - expectation balancing: Sinkhorn-scale the routing probabilities toward
//!   uniform expected loads before sampling.
//!
//! Estimator correctness is checked against brute-force oracles
//! (enumeration of all balanced assignments, exact expected gradients) in
//! [`oracle`], and the full training comparison is driven by [`sweep`].

pub mod config;
pub mod error;
pub mod estimators;
pub mod gumbel;
pub mod matching;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod rng;
pub mod sampling;
pub mod sinkhorn;
pub mod sweep;
pub mod train;
pub mod types;

pub use error::{Error, Result};
