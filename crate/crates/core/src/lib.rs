//! Synthetic dataset quality evaluation through generalized cross-validation.
//!
//! A synthetic dataset and N real reference datasets are harmonized to a
//! shared label space ([`harmonize`]), one model is trained per dataset and
//! evaluated on every test split through an external runner
//! ([`orchestrator`]), the resulting cross-performance matrix is
//! row-normalized ([`matrix`]) and reduced to two scores ([`metrics`]):
//! simulation quality A_o and transfer quality S_o. [`toyworld`] supplies
//! tiny deterministic domains and a built-in runner so the whole loop runs
//! in seconds; [`report`] renders the results.

pub(crate) mod fsutil;
pub mod harmonize;
pub mod matrix;
pub mod metrics;
pub mod orchestrator;
pub mod report;
pub mod toyworld;

pub use matrix::{build_matrix, normalize, CrossPerformanceMatrix, GcvMatrix, MetricValue};
pub use metrics::{score, QualityScores};
