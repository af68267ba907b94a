//! Stochastic variational inference with auxiliary-variable posteriors.
//!
//! Three ELBO constructions share one set of building blocks:
//!
//! * the standard bound `L(θ)` with a diagonal-Gaussian `Q(z|θ)`,
//! * the modified bound `L(θ, φ)` for a hierarchical `Q(z, λ|θ)` with an
//!   auxiliary density `R(λ|z, φ)` (optionally also conditioned on `x`),
//! * the standard bound of the extended model `P(x, z, λ|φ)` obtained by
//!   treating `R` as a generative factor.
//!
//! The [`oracle`] module computes the exact values of every bound by
//! quadrature on low-dimensional models so the Monte Carlo estimators, the
//! bound ordering and the equivalence of the last two constructions can be
//! checked numerically.

pub mod autodiff;
pub mod checkpoint;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod models;
pub mod nets;
pub mod oracle;
pub mod plot;
pub mod posteriors;
pub mod selftest;
pub mod stats;

pub use error::{Error, Result};
