//! Sensitivity-aware task vector insertion on an instrumented toy transformer.
//!
//! The pipeline has two learning stages on top of a trained in-context
//! learner:
//!
//! 1. [`sensitivity`]: compare each head's activation for a query with and
//!    without demonstrations, average the L2 deltas, keep the top-K heads.
//! 2. [`bank`] + [`policy`]: cluster context-enhanced activations at those
//!    heads into a per-head candidate bank, then learn a categorical choice
//!    per head with REINFORCE and keep the argmax.
//!
//! [`intervene`] applies the resulting plan by patching head outputs on
//! query-only inputs; [`baselines`] and [`harness`] provide comparisons,
//! ablations and the file-level pipeline.

pub mod bank;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod intervene;
pub mod math;
pub mod model;
pub mod policy;
pub mod sensitivity;
pub mod store;
pub mod tasks;

pub use error::{Error, Result};
