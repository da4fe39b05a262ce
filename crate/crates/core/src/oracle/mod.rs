//! Closed-form linear-Gaussian diffusion chains.
//!
//! With Gaussian data and affine-Gaussian backward conditionals every
//! marginal is Gaussian, so the per-step (modular) error, the accumulated
//! (cumulative) error, entropies and the cross-entropy recursion terms are
//! all exact. [`report`] assembles them per step and checks them against
//! sampled MMD estimates.

mod chain;
mod gaussian;
mod report;

pub use chain::{AffineStep, GaussChain, GaussianOptimalEps, Posterior};
pub use gaussian::{gaussian_kl, Gaussian, MAX_FULL_DIM};
pub use report::*;
