//! Direct and spillover treatment effects in clustered data under partial
//! interference: units may affect each other within a cluster, never across
//! clusters.
//!
//! Estimands are linear weight systems over a cluster's `2^M` treatment
//! assignments (direct effect, indirect/spillover effect, or user-defined
//! tables), estimated by an augmented inverse-probability-weighted moment
//! that is doubly robust in the cluster-level propensity `e(a | x, k)` and
//! the outcome regression `g(a, x, k)`. Inference uses the empirical
//! influence-function variance; two-fold cross-fitting, stratified by
//! cluster type, supports nonparametric outcome models.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release --example direct_effect_glmm         # mixed-model nuisances
//! cargo run --release --example crossfit_kernel_experiment # kernel + cross-fitting
//! cargo run --release --example policy_sweep               # effects across allocations
//! cargo run --release --example custom_estimand            # generic weight tables
//! cargo run --release --example bias_coverage_study        # replication harness
//! cargo run --release --example variance_adaptivity        # allocation-dependent variance
//! cargo run --release --example mixed_model_recovery       # nuisance parameter recovery
//! cargo run --release --example ingest_and_validate        # CSV ingestion
//! ```
//!
//! Module map:
//!
//! - [`data`] — cluster observations, treatment enumeration, allocation
//!   weights, CSV ingestion.
//! - [`estimand`] — weight systems `(w_k, v_k)`: direct, indirect, generic.
//! - [`propensity`] — known randomization and the logistic mixed-effects
//!   model with Gauss-Hermite integration of the random intercept.
//! - [`outcome`] — linear mixed-effects (compound symmetry), mixed-kernel
//!   smoothing, and the zero model.
//! - [`estimator`] — the estimating function, plug-in and cross-fitting
//!   estimators, variance and intervals.
//! - [`simulate`] — scenario generators, closed-form targets, and the
//!   Monte-Carlo harness.
//! - [`config`] — the JSON run configuration used by the `netfx` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod estimand;
pub mod estimator;
pub mod numeric;
pub mod outcome;
pub mod propensity;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
