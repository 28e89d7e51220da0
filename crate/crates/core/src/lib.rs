//! Piecewise exponential additive mixed models (PAMMs) with functional random
//! coefficients.
//!
//! The pipeline restructures right-censored survival data into piecewise
//! exponential data ([`ped`]), builds penalized spline and random-effect bases
//! ([`basis`]), fits the equivalent Poisson model with REML-selected
//! smoothing parameters ([`fit`]), and evaluates fits ([`metrics`]).
//! [`sim`] holds the data-generating processes and the Monte Carlo harness.

pub mod basis;
pub mod fit;
pub mod fmt;
pub mod metrics;
pub mod ped;
pub mod sim;
