//! Expected complete-data log-likelihood and its gradients with respect to
//! `G` and the row-softmax logits `Π̃_c`, holding posteriors fixed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{log_transitions, Posterior};
use crate::math::{log_sum_exp, weighted_log};
use crate::model::{
    log_prior_pi, sticky_concentration, GaussianEmissions, ModelParams, Sequence, SIMPLEX_FLOOR,
};

/// Per-sequence decomposition of the expected complete-data log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EcllTerms {
    /// `Σ_t Σ_i q(z_t=i) log N(x_t | θ_i)`.
    pub emission: f64,
    /// `Σ_i q(z_1=i) log init_i`.
    pub initial: f64,
    /// `Σ_t Σ_{i,j} q(z_t=i, z_{t-1}=j) log Ψ^{(t)}_{j,i}`.
    pub transition: f64,
}

impl EcllTerms {
    pub fn total(&self) -> f64 {
        self.emission + self.initial + self.transition
    }
}

fn check_posterior(params: &ModelParams, seq: &Sequence, post: &Posterior) -> Result<()> {
    let t = seq.len();
    if post.gamma.shape() != (t, params.k) || post.xi.len() + 1 != t {
        return Err(Error::Contract(format!(
            "posterior for sequence {} has gamma {:?} and {} xi slices; expected ({t}, {}) and {}",
            seq.id,
            post.gamma.shape(),
            post.xi.len(),
            params.k,
            t - 1
        )));
    }
    if post.class_index >= params.c {
        return Err(Error::Contract(format!(
            "posterior conditions on class {} but C={}",
            post.class_index, params.c
        )));
    }
    Ok(())
}

/// Expected complete-data log joint of one sequence under the class its
/// posterior conditions on. Excludes the prior on `Π`.
pub fn sequence_ecll(
    params: &ModelParams,
    emissions: &GaussianEmissions,
    seq: &Sequence,
    post: &Posterior,
) -> Result<EcllTerms> {
    check_posterior(params, seq, post)?;
    let emit = emissions.table(seq);
    let mut terms = EcllTerms::default();
    for t in 0..seq.len() {
        for i in 0..params.k {
            terms.emission += post.gamma[(t, i)] * emit[(t, i)];
        }
    }
    for i in 0..params.k {
        terms.initial += weighted_log(post.gamma[(0, i)], params.init_dist[i].ln());
    }
    terms.transition = transition_term(params, post.class_index, seq, post)?;
    Ok(terms)
}

fn transition_term(params: &ModelParams, c: usize, seq: &Sequence, post: &Posterior) -> Result<f64> {
    let log_psi = log_transitions(params, c, seq)?;
    let mut total = 0.0;
    for (xi, lp) in post.xi.iter().zip(&log_psi) {
        for i in 0..params.k {
            for j in 0..params.k {
                total += weighted_log(xi[(i, j)], lp[(j, i)]);
            }
        }
    }
    Ok(total)
}

fn labeled<'a>(
    params: &ModelParams,
    dataset: &'a [Sequence],
    posteriors: &'a [Vec<Posterior>],
) -> Result<Vec<(&'a Sequence, &'a Posterior)>> {
    if dataset.len() != posteriors.len() {
        return Err(Error::Contract(format!(
            "{} sequences but {} posterior sets",
            dataset.len(),
            posteriors.len()
        )));
    }
    let mut out = Vec::new();
    for (seq, posts) in dataset.iter().zip(posteriors) {
        let Some(y) = seq.label else { continue };
        if y >= params.c {
            return Err(Error::Contract(format!(
                "sequence {} has label {y} but C={}",
                seq.id, params.c
            )));
        }
        let post = posts
            .iter()
            .find(|p| p.class_index == y)
            .ok_or_else(|| Error::Contract(format!("no class-{y} posterior for sequence {}", seq.id)))?;
        check_posterior(params, seq, post)?;
        out.push((seq, post));
    }
    Ok(out)
}

/// Penalized ECLL: labeled sequences contribute through the posterior of
/// their own class, plus `Σ_c log p(Π_c)`.
pub fn ecll(params: &ModelParams, dataset: &[Sequence], posteriors: &[Vec<Posterior>]) -> Result<f64> {
    let emissions = GaussianEmissions::new(params)?;
    let mut total = 0.0;
    for (seq, post) in labeled(params, dataset, posteriors)? {
        total += sequence_ecll(params, &emissions, seq, post)?.total();
    }
    for c in 0..params.c {
        total += log_prior_pi(params, c)?.value;
    }
    Ok(total)
}

/// Transition terms plus priors: the part of the ECLL that depends on `G`
/// and `Π`. With `class = Some(c)` only class-`c` sequences and the class-`c`
/// prior are included.
pub fn transition_objective(
    params: &ModelParams,
    dataset: &[Sequence],
    posteriors: &[Vec<Posterior>],
    class: Option<usize>,
) -> Result<f64> {
    let stats = TransitionStats::new(params, dataset, posteriors)?;
    let drives = stats.drives(&params.g);
    stats.objective(params, &drives, class)
}

/// Gradient of the expected transition log-likelihood with respect to `G`.
pub fn grad_g(params: &ModelParams, dataset: &[Sequence], posteriors: &[Vec<Posterior>]) -> Result<DMatrix<f64>> {
    let stats = TransitionStats::new(params, dataset, posteriors)?;
    let drives = stats.drives(&params.g);
    Ok(stats.grad_g(params, &drives))
}

/// Gradient with respect to the logits `Π̃_c` (with `Π_c = softmax` per row)
/// of the class-`c` expected transition log-likelihood plus `log p(Π_c)`.
pub fn grad_pi(
    params: &ModelParams,
    c: usize,
    dataset: &[Sequence],
    posteriors: &[Vec<Posterior>],
) -> Result<DMatrix<f64>> {
    if c >= params.c {
        return Err(Error::Contract(format!("class index {c} out of range for C={}", params.c)));
    }
    let stats = TransitionStats::new(params, dataset, posteriors)?;
    let drives = stats.drives(&params.g);
    Ok(stats.grad_pi(params, c, &drives))
}

/// Two-slice marginals and lagged observations of every labeled sequence,
/// gathered once per E-step so the inner gradient loop never touches the
/// raw posteriors.
pub(crate) struct TransitionStats {
    seqs: Vec<SequenceStats>,
    k: usize,
}

struct SequenceStats {
    class: usize,
    /// `(T-1) × D`, row `t` is `x_t` (the input driving the move into `z_{t+1}`).
    lagged: DMatrix<f64>,
    /// Flattened `[t][i][j] = ξ_t(i, j)`.
    xi: Vec<f64>,
    /// Flattened `[t][j] = Σ_i ξ_t(i, j)`.
    source: Vec<f64>,
}

impl TransitionStats {
    pub(crate) fn new(params: &ModelParams, dataset: &[Sequence], posteriors: &[Vec<Posterior>]) -> Result<Self> {
        let k = params.k;
        let seqs = labeled(params, dataset, posteriors)?
            .into_iter()
            .filter(|(seq, _)| seq.len() > 1)
            .map(|(seq, post)| {
                let steps = seq.len() - 1;
                let lagged = seq.x.rows(0, steps).into_owned();
                let mut xi = Vec::with_capacity(steps * k * k);
                let mut source = Vec::with_capacity(steps * k);
                for slice in &post.xi {
                    for i in 0..k {
                        for j in 0..k {
                            xi.push(slice[(i, j)]);
                        }
                    }
                    for j in 0..k {
                        source.push(slice.column(j).sum());
                    }
                }
                SequenceStats {
                    class: post.class_index,
                    lagged,
                    xi,
                    source,
                }
            })
            .collect();
        Ok(TransitionStats { seqs, k })
    }

    /// Per-sequence drives `U = X_lagged Gᵀ`, `(T-1) × K`.
    pub(crate) fn drives(&self, g: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let gt = g.transpose();
        self.seqs.par_iter().map(|s| &s.lagged * &gt).collect()
    }

    /// Visits each transition with row `j` of `log Ψ_t` and `Ψ_t`, returning
    /// the per-sequence accumulations in order.
    ///
    /// `Ψ_{j,m} ∝ Π_{j,m} e^{u_m}`, so the exponentials are shared across rows;
    /// a row whose normalizer underflows falls back to log-sum-exp.
    fn fold<T: Send>(
        &self,
        params: &ModelParams,
        drives: &[DMatrix<f64>],
        class: Option<usize>,
        init: impl Fn(&SequenceStats) -> T + Sync,
        visit: impl Fn(&mut T, &SequenceStats, usize, usize, &[f64], &[f64]) + Sync,
    ) -> Vec<T> {
        let k = self.k;
        let log_pi = Self::log_pi(params);
        self.seqs
            .par_iter()
            .zip(drives)
            .filter(|(s, _)| class.map_or(true, |c| c == s.class))
            .map(|(s, u)| {
                let mut acc = init(s);
                let pi = &params.pi[s.class];
                let lp = &log_pi[s.class];
                let mut scaled = vec![0.0; k];
                let mut log_row = vec![0.0; k];
                let mut row = vec![0.0; k];
                for t in 0..u.nrows() {
                    let top = (0..k).map(|m| u[(t, m)]).fold(f64::NEG_INFINITY, f64::max);
                    for (m, e) in scaled.iter_mut().enumerate() {
                        *e = (u[(t, m)] - top).exp();
                    }
                    for j in 0..k {
                        let sum: f64 = (0..k).map(|m| pi[(j, m)] * scaled[m]).sum();
                        if sum > f64::MIN_POSITIVE && sum.is_finite() {
                            let norm = top + sum.ln();
                            for m in 0..k {
                                log_row[m] = lp[(j, m)] + u[(t, m)] - norm;
                                row[m] = pi[(j, m)] * scaled[m] / sum;
                            }
                        } else {
                            for m in 0..k {
                                log_row[m] = lp[(j, m)] + u[(t, m)];
                            }
                            let norm = log_sum_exp(&log_row);
                            for m in 0..k {
                                log_row[m] -= norm;
                                row[m] = log_row[m].exp();
                            }
                        }
                        visit(&mut acc, s, t, j, &log_row, &row);
                    }
                }
                acc
            })
            .collect()
    }

    fn log_pi(params: &ModelParams) -> Vec<DMatrix<f64>> {
        params.pi.iter().map(|p| p.map(f64::ln)).collect()
    }

    /// Transition terms plus the relevant priors.
    pub(crate) fn objective(&self, params: &ModelParams, drives: &[DMatrix<f64>], class: Option<usize>) -> Result<f64> {
        let k = self.k;
        let parts = self.fold(params, drives, class, |_| 0.0, |acc, s, t, j, log_row, _| {
            let base = t * k * k;
            for (i, lv) in log_row.iter().enumerate() {
                *acc += weighted_log(s.xi[base + i * k + j], *lv);
            }
        });
        let mut total: f64 = parts.iter().sum();
        for c in 0..params.c {
            if class.map_or(true, |only| only == c) {
                total += log_prior_pi(params, c)?.value;
            }
        }
        Ok(total)
    }

    /// Gradient with respect to `G` of the transition terms.
    pub(crate) fn grad_g(&self, params: &ModelParams, drives: &[DMatrix<f64>]) -> DMatrix<f64> {
        let k = self.k;
        // d/du_m of Σ_{i,j} ξ(i,j) log Ψ_{j,i} = Σ_j [ξ(m,j) − source_j Ψ_{j,m}]
        let parts = self.fold(
            params,
            drives,
            None,
            |s| vec![0.0; s.lagged.nrows() * k],
            |acc, s, t, j, _, row| {
                let base = t * k * k;
                let src = s.source[t * k + j];
                for (m, psi) in row.iter().enumerate() {
                    acc[t * k + m] += s.xi[base + m * k + j] - src * psi;
                }
            },
        );
        let mut grad = DMatrix::zeros(k, params.d);
        for (s, flat) in self.seqs.iter().zip(parts) {
            let du = DMatrix::from_row_slice(s.lagged.nrows(), k, &flat);
            grad += du.transpose() * &s.lagged;
        }
        grad
    }

    /// Closed-form maximizer of the class-`c` transition terms plus prior when
    /// the drive is zero: `Π_{j,m} ∝ Σ ξ(m, j) + a_{j,m} − 1`. `None` when some
    /// numerator is negative (the maximum then lies elsewhere on the boundary).
    pub(crate) fn map_pi(&self, params: &ModelParams, c: usize) -> Option<DMatrix<f64>> {
        let k = self.k;
        let mut counts = DMatrix::<f64>::zeros(k, k);
        for s in self.seqs.iter().filter(|s| s.class == c) {
            for slice in s.xi.chunks(k * k) {
                for m in 0..k {
                    for j in 0..k {
                        counts[(j, m)] += slice[m * k + j];
                    }
                }
            }
        }
        for j in 0..k {
            let conc = sticky_concentration(k, j, params.alpha, params.kappa);
            for m in 0..k {
                counts[(j, m)] += conc[m] - 1.0;
                if !(counts[(j, m)] >= 0.0) {
                    return None;
                }
            }
            let total: f64 = counts.row(j).sum();
            if !(total > 0.0) {
                return None;
            }
            counts.row_mut(j).apply(|v| *v /= total);
        }
        Some(counts)
    }

    /// Gradient with respect to the class-`c` logits, including the prior.
    pub(crate) fn grad_pi(&self, params: &ModelParams, c: usize, drives: &[DMatrix<f64>]) -> DMatrix<f64> {
        let k = self.k;
        let parts = self.fold(
            params,
            drives,
            Some(c),
            |_| DMatrix::<f64>::zeros(k, k),
            |acc, s, t, j, _, row| {
                let base = t * k * k;
                let src = s.source[t * k + j];
                for (m, psi) in row.iter().enumerate() {
                    acc[(j, m)] += s.xi[base + m * k + j] - src * psi;
                }
            },
        );
        let mut grad = DMatrix::zeros(k, k);
        for p in parts {
            grad += p;
        }

        // clamped entries are constant in the prior, so they drop out of its gradient
        let pi = &params.pi[c];
        for j in 0..k {
            let conc = sticky_concentration(k, j, params.alpha, params.kappa);
            let active = |m: usize| pi[(j, m)] >= SIMPLEX_FLOOR;
            let mass: f64 = (0..k).filter(|&m| active(m)).map(|m| conc[m] - 1.0).sum();
            for l in 0..k {
                let own = if active(l) { conc[l] - 1.0 } else { 0.0 };
                grad[(j, l)] += own - pi[(j, l)] * mass;
            }
        }
        grad
    }
}
