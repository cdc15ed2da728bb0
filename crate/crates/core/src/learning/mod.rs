//! Generalized EM for the hierarchical recurrent HMM.
//!
//! Each outer iteration runs exact class-conditional E-steps, an analytic
//! Gaussian update, and `L` inner gradient steps on the recurrent matrix `G`
//! and the per-class transition logits `Π̃_c` (row-softmax parameterized),
//! each guarded by a halving line search so the penalized objective never
//! decreases.

mod em;
mod gmm;
mod gradcheck;
pub mod objective;

use serde::{Deserialize, Serialize};

pub use em::{
    e_step, em_fit, em_fit_from, em_init, m_step_gaussian, softmax_rows, FitReport,
    InitialModel, TraceEntry,
};
pub use gmm::{covariance_scale, floor_covariance, gmm_init};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use objective::{ecll, grad_g, grad_pi, sequence_ecll, transition_objective, EcllTerms};

/// Training configuration. Serialized field names mirror the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Outer EM iterations.
    #[serde(rename = "M")]
    pub iterations: usize,
    /// Inner gradient steps per M-step.
    #[serde(rename = "L")]
    pub inner_steps: usize,
    pub eta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Eigenvalue floor for Σ updates, in units of the pooled data variance.
    pub cov_floor: f64,
    /// Relative objective change below which EM stops early.
    pub tol: f64,
    /// Keep `G` fixed at its initial value (zero). The Π-step then uses its
    /// closed-form MAP update whenever all its numerators are non-negative.
    pub freeze_g: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 200,
            inner_steps: 10,
            eta: 1e-2,
            k: 8,
            alpha: 0.5,
            kappa: 100.0,
            seed: 0,
            cov_floor: 1e-6,
            tol: 1e-6,
            freeze_g: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidParameter(m.to_string()));
        if self.iterations < 1 {
            return bad("M must be at least 1");
        }
        if self.inner_steps < 1 {
            return bad("L must be at least 1");
        }
        // eta = 0 disables the gradient steps entirely
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be a finite non-negative number");
        }
        if self.k < 1 {
            return bad("K must be at least 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.kappa >= 0.0) {
            return bad("kappa must be non-negative");
        }
        if !(self.cov_floor > 0.0) {
            return bad("cov_floor must be positive");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be non-negative");
        }
        Ok(())
    }
}

/// Maximum number of step halvings in the inner line search.
pub const MAX_HALVINGS: usize = 30;
