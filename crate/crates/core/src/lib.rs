//! Learning welfare-maximizing binary policy rules from a single
//! multivariate time series.
//!
//! The estimators weight observed outcomes by inverse propensities to score
//! counterfactual policies, then maximize that empirical welfare over a
//! policy class: discrete maps on the previous treatment, axis-aligned
//! quadrant rules over lagged observables, or an explicit finite list. A
//! two-period extension is solved by backward induction, and a seeded
//! simulation/Monte Carlo layer reproduces the estimator's threshold
//! distribution at several sample sizes.

pub mod data;
pub mod error;
pub mod montecarlo;
pub mod multiperiod;
pub mod propensity;
pub mod search;
pub mod simulate;
pub mod util;
pub mod welfare;

pub use error::{Error, Result};
