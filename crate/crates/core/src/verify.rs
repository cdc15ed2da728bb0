//! Self-check harness comparing forward-backward against brute-force path
//! enumeration on random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::{forward_backward, oracle_posterior, Posterior};
use crate::simulator::random_instance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub instances: usize,
    pub max_err_gamma: f64,
    pub max_err_xi: f64,
    pub max_err_log_evidence: f64,
}

impl OracleReport {
    pub fn max_error(&self) -> f64 {
        self.max_err_gamma.max(self.max_err_xi).max(self.max_err_log_evidence)
    }
}

/// `|a − b| / |b|`, taking exact agreement (including `0 = 0`) as zero error
/// and falling back to `|a|` when the reference is zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Largest entrywise differences between two posteriors: gamma, xi and
/// log-evidence.
pub fn posterior_errors(a: &Posterior, b: &Posterior) -> (f64, f64, f64) {
    let g = a
        .gamma
        .iter()
        .zip(b.gamma.iter())
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max);
    let x = a
        .xi
        .iter()
        .zip(&b.xi)
        .flat_map(|(p, q)| p.iter().zip(q.iter()).map(|(x, y)| relative_error(*x, *y)))
        .fold(0.0, f64::max);
    (g, x, relative_error(a.log_evidence, b.log_evidence))
}

/// Random instances with K ∈ {2,3}, T ∈ {3..6}, D ∈ {1,2} and non-zero `G`.
pub fn oracle_check(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        seed,
        instances,
        max_err_gamma: 0.0,
        max_err_xi: 0.0,
        max_err_log_evidence: 0.0,
    };
    for _ in 0..instances {
        let k = rng.gen_range(2..=3);
        let t = rng.gen_range(3..=6);
        let d = rng.gen_range(1..=2);
        let (params, seqs) = random_instance(k, d, 2, t, 1, rng.gen())?;
        for c in 0..params.c {
            let fb = forward_backward(&params, c, &seqs[0])?;
            let brute = oracle_posterior(&params, c, &seqs[0])?;
            let (g, x, l) = posterior_errors(&fb, &brute);
            report.max_err_gamma = report.max_err_gamma.max(g);
            report.max_err_xi = report.max_err_xi.max(x);
            report.max_err_log_evidence = report.max_err_log_evidence.max(l);
        }
    }
    Ok(report)
}
