#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Hierarchical distributionally robust optimization.
//!
//! Group DRO reweights groups over the probability simplex; this crate
//! additionally lets each group's distribution move inside a
//! Wasserstein-infinity ball in the latent space of the model's last layer.
//! Training minimizes the per-example latent-ball surrogate of that worst case
//! with a three-coordinate stochastic procedure (latent ascent, exponentiated
//! group-weight ascent, parameter descent).
//!
//! Modules:
//! * [`datagen`]: grouped synthetic datasets, shifts, CSV I/O.
//! * [`model`]: linear and one-hidden-layer predictors with exact gradients.
//! * [`ambiguity`]: radii, latent ball maximization and small-scale oracles.
//! * [`solver`]: the training loop with ERM and group DRO as degenerate modes.
//! * [`eval`], [`tuning`], [`convergence`]: metrics, radius selection and
//!   convergence diagnostics.

pub mod ambiguity;
pub mod convergence;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod solver;
pub mod tuning;

pub use error::{HdroError, Result};
