use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::em::{e_step, softmax_rows};
use super::objective::{ecll, grad_g, grad_pi};
use crate::error::Result;
use crate::model::ModelParams;
use crate::simulator::random_instance;

/// Maximum relative error of the analytic gradients against central finite
/// differences of the ECLL, over a batch of random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub max_rel_err_g: f64,
    pub max_rel_err_pi: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err_g < tol && self.max_rel_err_pi < tol
    }
}

/// `max |a − f| / max |f|` over one parameter block.
fn block_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = numeric.amax().max(1e-12);
    (analytic - numeric).amax() / scale
}

/// Checks `grad_g` and `grad_pi` on `instances` random problems
/// (K=3, D=2, C=2, T=5, N=2) with step `h`.
pub fn gradcheck(instances: usize, seed: u64, h: f64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        seed,
        instances,
        step: h,
        max_rel_err_g: 0.0,
        max_rel_err_pi: 0.0,
    };
    for i in 0..instances {
        let (params, data) = random_instance(3, 2, 2, 5, 2, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        let posts = e_step(&params, &data)?;

        let analytic = grad_g(&params, &data, &posts)?;
        let numeric = finite_difference(&params.g, h, |g| {
            let mut p = params.clone();
            p.g = g.clone();
            ecll(&p, &data, &posts)
        })?;
        report.max_rel_err_g = report.max_rel_err_g.max(block_error(&analytic, &numeric));

        for c in 0..params.c {
            let analytic = grad_pi(&params, c, &data, &posts)?;
            let logits = params.pi[c].map(f64::ln);
            let numeric = finite_difference(&logits, h, |l| {
                let mut p: ModelParams = params.clone();
                p.pi[c] = softmax_rows(l);
                ecll(&p, &data, &posts)
            })?;
            report.max_rel_err_pi = report.max_rel_err_pi.max(block_error(&analytic, &numeric));
        }
    }
    Ok(report)
}

/// Central differences of `f` with respect to every entry of `at`.
pub(crate) fn finite_difference(
    at: &DMatrix<f64>,
    h: f64,
    mut f: impl FnMut(&DMatrix<f64>) -> Result<f64>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(at.nrows(), at.ncols());
    let mut probe = at.clone();
    for idx in 0..at.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe)?;
        probe[idx] = orig - h;
        let down = f(&probe)?;
        probe[idx] = orig;
        out[idx] = (up - down) / (2.0 * h);
    }
    Ok(out)
}
