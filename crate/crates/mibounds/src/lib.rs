//! Mutual information and log-partition bounds on tractable models.
//!
//! Every estimator works on a per-observation *bridge*: a normalized base
//! density `q(z|x)` that can be sampled, and an unnormalized target `p(x, z)`
//! whose normalizer is `p(x)`. Lower bounds on `log p(x)` turn into upper
//! bounds on `I(x; z)` and vice versa.
//!
//! The discrete oracle in [`bounds::enumerate`] computes exact expectations
//! of the same estimators by brute force, which is what the Monte Carlo
//! paths are tested against.

pub mod ais;
pub mod bounds;
pub mod density;
pub mod energy;
pub mod error;
pub mod harness;
pub mod models;
pub mod multisample;
pub mod rng;
pub mod stats;
pub mod task;
pub mod variational;

pub use error::{Error, Result};
