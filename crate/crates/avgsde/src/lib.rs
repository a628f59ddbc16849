//! Simulation and verification toolkit for the averaging principle of
//! distribution-dependent SDEs with highly oscillating (possibly singular)
//! drift.
//!
//! The crate integrates synchronously coupled particle approximations of an
//! oscillating system and its averaged counterpart, estimates strong and
//! total-variation errors as functions of the time scale ε, evaluates the
//! closed-form rate balances those errors should follow, and orchestrates
//! the ε-sweep experiments that compare the two.
//!
//! Modules:
//! - [`model`] — drifts, diffusions, empirical measures, averaging operations;
//! - [`drifts`] — the shipped drift families (singular kernel, oscillatory
//!   interaction, smooth baselines);
//! - [`simulator`] — coupled Euler–Maruyama integration with counter-based
//!   noise streams;
//! - [`metrics`] — strong error, histogram total variation, fluctuation
//!   functional;
//! - [`rates`] — inf_h rate balances, closed-form exponents, slope fitting;
//! - [`harness`] — config parsing, studies, CSV/JSON reports, CLI plumbing.

// `!(x > 0.0)` rejects NaN along with nonpositive values; the suggested
// `x <= 0.0` would let NaN through every validation gate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod drifts;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rates;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
