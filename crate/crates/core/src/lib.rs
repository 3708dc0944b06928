//! Data-free class-incremental learning with consistency-enhanced replay and
//! a debiased classifier.
//!
//! The framework learns a sequence of disjoint class sets without storing old
//! data or generators. Each task runs three stages:
//!
//! 1. **Inversion** — a fresh generator is trained against the frozen old
//!    model (`inversion`), with a data-consistency enhancement (DCE) loss
//!    that pulls generated feature statistics toward the tied-Gaussian
//!    statistics stored at the end of the previous task.
//! 2. **Training** — the new model learns from real new-class batches and
//!    generated old-class batches (`training`), with an optional weight
//!    alignment regularization (WAR) that keeps per-class classifier weight
//!    norms unbiased across old and new classes.
//! 3. **Estimation** — per-class feature means and one shared (tied)
//!    covariance are re-estimated under the new extractor (`stats`) and
//!    carried to the next task through the checkpoint.
//!
//! Measurement instruments live in `stats` (Monte-Carlo KL between Gaussian
//! mixtures, KDE-based KL with Scott's-rule bandwidth) and `analysis`
//! (incremental accuracy, weight-norm profiles, gradient-direction ratios,
//! and the 2-task bias experiment harness).
//!
//! All numerics run in f64 on a small tape autodiff (`tensor`) with
//! deterministic CPU kernels; identical configs and seeds reproduce results
//! bit-for-bit.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inversion;
pub mod model;
pub mod nn;
pub mod plot;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod training;


pub use error::{CoreError, Result};
