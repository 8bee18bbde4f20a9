//! Mixtures of regression models: kernels, links, mixing measures, estimation
//! by EM and Gibbs sampling, identifiability diagnostics and convergence-rate
//! experiments.

pub mod bayes;
pub mod em;
pub mod error;
pub mod experiments;
pub mod identifiability;
pub mod kernels;
pub mod links;
pub mod measures;
pub mod model;
pub mod quad;
pub mod seed;
pub mod special;

pub use error::{Error, Result};
