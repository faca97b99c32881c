//! Online resource allocation with budget constraints when the arrival
//! distribution drifts over time.
//!
//! The crate covers dual-gradient policies driven by a prior estimate, a
//! re-solving policy for finite-support arrivals, static baselines,
//! Wasserstein deviation and non-stationarity budgets, a small dense LP
//! solver and the Monte Carlo harness that measures regret against the
//! hindsight optimum.

pub mod error;
pub mod harness;
pub mod lp;
pub mod model;
pub mod oracle;
pub mod policies;
pub mod wasserstein;

pub use error::{Error, Result};
