//! Optimal design of biomarker-driven clinical trials with nested
//! subpopulations: significance-level allocation under a family-wise error
//! rate constraint and selection of subpopulation sizes, both by maximizing
//! Monte-Carlo-estimated expected power stabilized with thin-plate-spline
//! smoothing.
//!
//! The crate is organized around the pipeline:
//!
//! * [`model`] — trial geometry, sizing, effect-size priors;
//! * [`mvn`] — Cholesky, correlated sampling, deterministic MVN CDF;
//! * [`constraint`] — FWER evaluation and constrained candidate generation;
//! * [`power`] — grid-sum, Monte-Carlo and fine-grid power estimators;
//! * [`tps`] — thin-plate-spline surfaces with analytic gradients;
//! * [`optimizer`] — bound-constrained quasi-Newton search and the
//!   end-to-end "optimal alpha for fixed r" pipelines;
//! * [`sweep`] — the outer loop over subpopulation sizes and the
//!   method-comparison statistics.

pub mod constraint;
pub mod error;
pub mod model;
pub mod mvn;
pub mod normal;
pub mod optimizer;
pub mod power;
pub mod sweep;
pub mod tps;

pub use error::{Error, Result};
