//! Sparse variational Gaussian processes with mixture-of-Gaussians
//! posteriors, reparameterized stochastic ELBO optimization and
//! leave-one-out hyperparameter learning.
//!
//! All objectives are maximized. Gradients are derived by hand and checked
//! against finite differences in the test suites.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod likelihoods;
pub mod math;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
