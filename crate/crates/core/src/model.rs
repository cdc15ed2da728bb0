//! Parameter types, the recurrent transition construction, Gaussian emission
//! densities and the sticky Dirichlet prior.
//!
//! State index conventions: `pi[c][(k, j)]` is the probability of moving from
//! state `k` to state `j` under class `c`, so rows index the source state.
//! `g` is `K × D` and perturbs destination logits by `g · x_prev`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::math::{ln_gamma, log_sum_exp};

/// Entries of Π below this value are clamped before the Dirichlet log-density
/// is evaluated.
pub const SIMPLEX_FLOOR: f64 = 1e-8;

const STOCHASTIC_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// All learnable and fixed quantities of the hierarchical recurrent HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub k: usize,
    pub d: usize,
    pub c: usize,
    /// Emission means, one per state.
    pub mu: Vec<DVector<f64>>,
    /// Emission covariances, one SPD `D × D` matrix per state.
    pub sigma: Vec<DMatrix<f64>>,
    /// Class-conditional row-stochastic transition matrices.
    pub pi: Vec<DMatrix<f64>>,
    /// Recurrent state perturbation matrix, `K × D`.
    pub g: DMatrix<f64>,
    pub alpha: f64,
    pub kappa: f64,
    pub class_prior: Vec<f64>,
    /// Law of `z_1`. Never learned.
    pub init_dist: Vec<f64>,
    pub class_names: Vec<String>,
}

impl ModelParams {
    /// A model with zero means, identity covariances, uniform transitions,
    /// `G = 0` and uniform class/initial distributions.
    pub fn neutral(k: usize, d: usize, c: usize, alpha: f64, kappa: f64) -> Self {
        ModelParams {
            k,
            d,
            c,
            mu: vec![DVector::zeros(d); k],
            sigma: vec![DMatrix::identity(d, d); k],
            pi: vec![DMatrix::from_element(k, k, 1.0 / k as f64); c],
            g: DMatrix::zeros(k, d),
            alpha,
            kappa,
            class_prior: vec![1.0 / c as f64; c],
            init_dist: vec![1.0 / k as f64; k],
            class_names: (0..c).map(|i| format!("class_{i}")).collect(),
        }
    }

    /// Checks every structural and numeric invariant.
    pub fn validate(&self) -> Result<()> {
        let (k, d, c) = (self.k, self.d, self.c);
        if k == 0 || d == 0 || c == 0 {
            return Err(Error::InvalidParameter(format!(
                "K, D and C must be positive (got K={k}, D={d}, C={c})"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be non-negative, got {}",
                self.kappa
            )));
        }
        if self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::InvalidParameter(format!(
                "expected {k} means and covariances, got {} and {}",
                self.mu.len(),
                self.sigma.len()
            )));
        }
        if self.pi.len() != c || self.class_prior.len() != c || self.class_names.len() != c {
            return Err(Error::InvalidParameter(format!(
                "expected {c} transition matrices, class priors and class names"
            )));
        }
        if self.init_dist.len() != k {
            return Err(Error::InvalidParameter(format!(
                "init_dist has length {}, expected {k}",
                self.init_dist.len()
            )));
        }
        if self.g.shape() != (k, d) {
            return Err(Error::InvalidParameter(format!(
                "G has shape {:?}, expected ({k}, {d})",
                self.g.shape()
            )));
        }
        if self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("G has non-finite entries".into()));
        }
        for (s, m) in self.mu.iter().enumerate() {
            if m.len() != d || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "mean of state {s} must be a finite vector of length {d}"
                )));
            }
        }
        for (s, cov) in self.sigma.iter().enumerate() {
            if cov.shape() != (d, d) {
                return Err(Error::InvalidParameter(format!(
                    "covariance of state {s} has shape {:?}",
                    cov.shape()
                )));
            }
            for i in 0..d {
                for j in 0..i {
                    let (a, b) = (cov[(i, j)], cov[(j, i)]);
                    if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::InvalidParameter(format!(
                            "covariance of state {s} is not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
            if Cholesky::new(cov.clone()).is_none() {
                return Err(Error::NotPositiveDefinite { state: s });
            }
        }
        for (cls, p) in self.pi.iter().enumerate() {
            if p.shape() != (k, k) {
                return Err(Error::InvalidParameter(format!(
                    "transition matrix of class {cls} has shape {:?}",
                    p.shape()
                )));
            }
            for row in 0..k {
                let r = p.row(row);
                if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::InvalidParameter(format!(
                        "class {cls} row {row} of the transition matrix has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "class {cls} row {row} of the transition matrix sums to {sum}"
                    )));
                }
            }
        }
        check_distribution("class_prior", &self.class_prior)?;
        check_distribution("init_dist", &self.init_dist)?;
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidParameter(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// One subject's `T × D` observation matrix (rows are timesteps).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub x: DMatrix<f64>,
    pub label: Option<usize>,
    pub id: String,
}

impl Sequence {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        if x.nrows() == 0 {
            return Err(Error::Input(format!("sequence {id} has no timesteps")));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let (t, d) = (pos % x.nrows(), pos / x.nrows());
            return Err(Error::Input(format!(
                "sequence {id} has a non-finite value at t={t}, dim={d}"
            )));
        }
        Ok(Sequence { x, label, id })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Observation at timestep `t` as a column vector.
    pub fn frame(&self, t: usize) -> DVector<f64> {
        self.x.row(t).transpose()
    }
}

/// Row-wise log of `Ψ = normalize(Π_c ⊙ exp(G x_prev))`.
pub fn log_recurrent_transition(
    params: &ModelParams,
    c: usize,
    x_prev: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if c >= params.c {
        return Err(Error::Contract(format!(
            "class index {c} out of range for C={}",
            params.c
        )));
    }
    if x_prev.len() != params.d {
        return Err(Error::Contract(format!(
            "x_prev has length {}, expected D={}",
            x_prev.len(),
            params.d
        )));
    }
    if x_prev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("x_prev has non-finite entries".into()));
    }
    let drive = &params.g * x_prev;
    log_transition_from_drive(&params.pi[c], &drive, c)
}

/// `log Ψ` given the precomputed destination drive `u = G x_prev`.
pub(crate) fn log_transition_from_drive(
    pi: &DMatrix<f64>,
    drive: &DVector<f64>,
    class: usize,
) -> Result<DMatrix<f64>> {
    let k = pi.nrows();
    let mut out = DMatrix::zeros(k, k);
    let mut logits = vec![0.0; k];
    for row in 0..k {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = pi[(row, j)].ln() + drive[j];
        }
        let norm = log_sum_exp(&logits);
        if norm == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter(format!(
                "class {class} row {row} of the transition matrix is all zero"
            )));
        }
        if !norm.is_finite() {
            return Err(Error::Input(format!(
                "recurrent drive overflowed for class {class} row {row}"
            )));
        }
        for (j, l) in logits.iter().enumerate() {
            out[(row, j)] = l - norm;
        }
    }
    Ok(out)
}

/// `Ψ^{(t)}` for class `c` driven by the previous observation.
pub fn recurrent_transition(
    params: &ModelParams,
    c: usize,
    x_prev: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    Ok(log_recurrent_transition(params, c, x_prev)?.map(f64::exp))
}

/// Cached Cholesky factors for evaluating all emission densities of a model.
#[derive(Debug, Clone)]
pub struct GaussianEmissions {
    means: Vec<DVector<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_norm: Vec<f64>,
}

impl GaussianEmissions {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let d = params.d as f64;
        let mut factors = Vec::with_capacity(params.k);
        let mut log_norm = Vec::with_capacity(params.k);
        for (s, cov) in params.sigma.iter().enumerate() {
            let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite { state: s })?;
            let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
            log_norm.push(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det_half);
            factors.push(chol);
        }
        Ok(GaussianEmissions {
            means: params.mu.clone(),
            factors,
            log_norm,
        })
    }

    pub fn num_states(&self) -> usize {
        self.factors.len()
    }

    /// `log N(x | μ_k, Σ_k)`.
    pub fn logpdf(&self, k: usize, x: &DVector<f64>) -> f64 {
        let mut r = x - &self.means[k];
        // L r' = r, so r'·r' is the Mahalanobis distance
        self.factors[k].l_dirty().solve_lower_triangular_mut(&mut r);
        self.log_norm[k] - 0.5 * r.norm_squared()
    }

    /// `T × K` table of emission log-densities for a whole sequence.
    pub fn table(&self, seq: &Sequence) -> DMatrix<f64> {
        let k = self.num_states();
        let mut out = DMatrix::zeros(seq.len(), k);
        for t in 0..seq.len() {
            let x = seq.frame(t);
            for s in 0..k {
                out[(t, s)] = self.logpdf(s, &x);
            }
        }
        out
    }
}

/// `log N(x | μ_k, Σ_k)` via a fresh Cholesky factorization of `Σ_k`.
pub fn emission_logpdf(params: &ModelParams, k: usize, x: &DVector<f64>) -> Result<f64> {
    if k >= params.k {
        return Err(Error::Contract(format!("state {k} out of range for K={}", params.k)));
    }
    if x.len() != params.d {
        return Err(Error::Contract(format!(
            "observation has length {}, expected D={}",
            x.len(),
            params.d
        )));
    }
    let chol = Cholesky::new(params.sigma[k].clone()).ok_or(Error::NotPositiveDefinite { state: k })?;
    let mut r = x - &params.mu[k];
    chol.l_dirty().solve_lower_triangular_mut(&mut r);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    Ok(-0.5 * params.d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half - 0.5 * r.norm_squared())
}

/// Result of evaluating the sticky Dirichlet prior on one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorValue {
    pub value: f64,
    /// Number of entries raised to [`SIMPLEX_FLOOR`] before evaluation.
    pub clamped: usize,
}

/// Concentration vector of the sticky prior for source row `row`.
pub fn sticky_concentration(k: usize, row: usize, alpha: f64, kappa: f64) -> Vec<f64> {
    (0..k)
        .map(|j| if j == row { alpha + kappa } else { alpha })
        .collect()
}

/// Log-density of one probability row under `Dir(α·1 + κ·e_row)`, with the
/// floor applied. Returns the value and the number of clamped entries.
pub(crate) fn log_dirichlet_row(
    probs: impl Iterator<Item = f64>,
    row: usize,
    k: usize,
    alpha: f64,
    kappa: f64,
) -> (f64, usize) {
    let conc = sticky_concentration(k, row, alpha, kappa);
    let total: f64 = conc.iter().sum();
    let mut value = ln_gamma(total) - conc.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let mut clamped = 0;
    for (a, p) in conc.iter().zip(probs) {
        let p = if p < SIMPLEX_FLOOR {
            clamped += 1;
            SIMPLEX_FLOOR
        } else {
            p
        };
        value += (a - 1.0) * p.ln();
    }
    (value, clamped)
}

/// `Σ_k log Dir(Π_c[k, :] | α·1_K + κ·e_k)` including normalizers.
pub fn log_prior_pi(params: &ModelParams, c: usize) -> Result<PriorValue> {
    if c >= params.c {
        return Err(Error::Contract(format!(
            "class index {c} out of range for C={}",
            params.c
        )));
    }
    let pi = &params.pi[c];
    let mut out = PriorValue {
        value: 0.0,
        clamped: 0,
    };
    for row in 0..params.k {
        let (v, n) = log_dirichlet_row(pi.row(row).iter().copied(), row, params.k, params.alpha, params.kappa);
        out.value += v;
        out.clamped += n;
    }
    if out.clamped > 0 {
        log::debug!("log_prior_pi: clamped {} entries of class {c}", out.clamped);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_state() -> ModelParams {
        let mut p = ModelParams::neutral(2, 1, 1, 1.0, 0.0);
        p.pi[0] = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        p
    }

    #[test]
    fn zero_g_returns_pi() {
        let mut p = ModelParams::neutral(3, 2, 2, 0.5, 1.0);
        p.pi[1] = DMatrix::from_row_slice(3, 3, &[0.7, 0.2, 0.1, 0.3, 0.3, 0.4, 0.05, 0.05, 0.9]);
        let psi = recurrent_transition(&p, 1, &DVector::from_vec(vec![3.0, -7.0])).unwrap();
        for (a, b) in psi.iter().zip(p.pi[1].iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn three_to_one_reweighting() {
        let mut p = two_state();
        p.g = DMatrix::from_row_slice(2, 1, &[3f64.ln(), 0.0]);
        let psi = recurrent_transition(&p, 0, &DVector::from_vec(vec![1.0])).unwrap();
        assert!((psi[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((psi[(0, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn transition_rejects_bad_input() {
        let mut p = two_state();
        assert!(matches!(
            recurrent_transition(&p, 0, &DVector::from_vec(vec![f64::NAN])),
            Err(Error::Input(_))
        ));
        p.pi[0] = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(
            recurrent_transition(&p, 0, &DVector::from_vec(vec![1.0])),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn huge_drive_does_not_overflow() {
        let mut p = two_state();
        p.g = DMatrix::from_row_slice(2, 1, &[800.0, 0.0]);
        let psi = recurrent_transition(&p, 0, &DVector::from_vec(vec![2.0])).unwrap();
        assert!((psi[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(psi.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = ModelParams::neutral(1, 4, 1, 1.0, 0.0);
        let v = emission_logpdf(&p, 0, &DVector::zeros(4)).unwrap();
        assert!((v + 2.0 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn scaled_variance_closed_form() {
        let mut p = ModelParams::neutral(1, 1, 1, 1.0, 0.0);
        p.sigma[0] = DMatrix::from_element(1, 1, 4.0);
        let v = emission_logpdf(&p, 0, &DVector::zeros(1)).unwrap();
        let expected = -0.5 * (2.0 * PI).ln() - 0.5 * 4f64.ln();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn non_spd_reports_state() {
        let mut p = ModelParams::neutral(2, 2, 1, 1.0, 0.0);
        p.sigma[1] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match emission_logpdf(&p, 1, &DVector::zeros(2)) {
            Err(Error::NotPositiveDefinite { state }) => assert_eq!(state, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(GaussianEmissions::new(&p), Err(Error::NotPositiveDefinite { state: 1 })));
    }

    #[test]
    fn uniform_dirichlet_prior() {
        for k in 1..6 {
            let p = ModelParams::neutral(k, 1, 1, 1.0, 0.0);
            let fact: f64 = (1..k).map(|i| (i as f64).ln()).sum();
            let v = log_prior_pi(&p, 0).unwrap();
            assert!((v.value - k as f64 * fact).abs() < 1e-10, "K={k}");
            assert_eq!(v.clamped, 0);
        }
    }

    #[test]
    fn sticky_prior_prefers_diagonal() {
        let k = 8;
        let eps = 0.02;
        let mut sticky = ModelParams::neutral(k, 1, 1, 0.5, 100.0);
        sticky.pi[0] = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0 - eps
            } else {
                eps / (k - 1) as f64
            }
        });
        let uniform = ModelParams::neutral(k, 1, 1, 0.5, 100.0);
        assert!(log_prior_pi(&sticky, 0).unwrap().value > log_prior_pi(&uniform, 0).unwrap().value);
    }

    #[test]
    fn prior_clamps_zero_entries() {
        let mut p = ModelParams::neutral(2, 1, 1, 0.5, 0.0);
        p.pi[0] = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let v = log_prior_pi(&p, 0).unwrap();
        assert_eq!(v.clamped, 1);
        assert!(v.value.is_finite());
    }

    #[test]
    fn validate_catches_row_sum() {
        let mut p = ModelParams::neutral(2, 1, 2, 1.0, 0.0);
        assert!(p.validate().is_ok());
        p.pi[1][(0, 0)] = 1.0;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("class 1 row 0"), "{err}");
    }

    #[test]
    fn sequence_rejects_non_finite() {
        let mut x = DMatrix::zeros(3, 2);
        x[(2, 1)] = f64::INFINITY;
        let err = Sequence::new("s", x, None).unwrap_err().to_string();
        assert!(err.contains("t=2, dim=1"), "{err}");
        assert!(Sequence::new("s", DMatrix::zeros(0, 2), None).is_err());
    }
}
