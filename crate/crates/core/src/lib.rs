//! Hierarchical recurrent hidden Markov models.
//!
//! Latent states follow class-conditional sticky transition matrices `Π_c`
//! reweighted at every step by a shared observation-dependent perturbation
//! `exp(G x_{t-1})`; emissions are shared Gaussians. Training is generalized
//! EM and classification is a Bayes rule over class-conditional posteriors.

pub mod analytics;
pub mod error;
pub mod inference;
pub mod io;
pub mod learning;
pub mod math;
pub mod model;
pub mod simulator;
pub mod verify;

pub use error::{Error, Result};
pub use inference::{forward_backward, log_likelihood, oracle_posterior, Posterior};
pub use learning::{em_fit, FitConfig, FitReport};
pub use model::{emission_logpdf, log_prior_pi, recurrent_transition, ModelParams, Sequence};
