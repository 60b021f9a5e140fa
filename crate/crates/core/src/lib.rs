//! Bayesian quantum tomography with Kalman-filter updates.
//!
//! The library reconstructs quantum states (and diagonal POVMs) from counted
//! measurement data, propagating a full Gaussian posterior instead of a bare
//! point estimate. Measurement statistics enter through Dirichlet moment
//! matching, exact affine constraints are projected out of the estimation
//! space, and physicality (positivity) is imposed afterwards by iterated
//! Gaussian restriction. Confidence regions, operator error bars, maximum
//! likelihood extraction and cost-functional regularization all operate on
//! the same posterior object.
//!
//! Modules, in dependency order:
//!
//! * [`repr`]: Hermitian matrices, vectorization, pseudo-inverses, constraint
//!   isometries.
//! * [`stats`]: outcome records, Dirichlet moment matching, chi-square and
//!   Wald statistics.
//! * [`kalman`]: the Gaussian posterior and its measurement updates.
//! * [`confidence`]: confidence regions and operator error bars.
//! * [`restrict`]: restriction of the posterior to the physical set and
//!   maximum-likelihood extraction.
//! * [`regularize`]: cost-functional optimization over the physical
//!   confidence region.
//! * [`simulate`]: synthetic data generation for calibration studies.

pub mod confidence;
pub mod kalman;
pub mod regularize;
pub mod repr;
pub mod restrict;
pub mod simulate;
pub mod stats;

mod special;
