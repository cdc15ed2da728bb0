//! Exact sampler for the generative process and benchmark helpers.
//!
//! Every sequence draws from its own ChaCha stream keyed by `(seed, index)`,
//! so datasets are identical however they are scheduled across threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{recurrent_transition, ModelParams, Sequence};

const MEAN_PLACEMENT_ATTEMPTS: usize = 10_000;
const PI_ATTEMPTS: usize = 1_000;

/// Knobs controlling how a benchmark ground-truth model is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationSpec {
    /// Minimum Euclidean distance between any two emission means.
    pub min_mean_distance: f64,
    /// Dirichlet concentration of the transition prior.
    pub alpha: f64,
    /// Sticky boost; ignored when `self_transition` is set.
    pub kappa: f64,
    /// Target expected self-transition probability. Sets `kappa` so the
    /// prior mean of each diagonal entry equals this value.
    pub self_transition: Option<f64>,
    /// Minimum total-variation distance between the same row of any two
    /// class transition matrices.
    pub min_class_tv: f64,
    /// Scale of the emission covariances.
    pub cov_scale: f64,
    /// Standard deviation of the entries of `G`.
    pub g_scale: f64,
}

impl Default for SeparationSpec {
    fn default() -> Self {
        SeparationSpec {
            min_mean_distance: 4.0,
            alpha: 0.5,
            kappa: 100.0,
            self_transition: Some(0.9),
            min_class_tv: 0.0,
            cov_scale: 1.0,
            g_scale: 0.05,
        }
    }
}

impl SeparationSpec {
    /// Effective sticky boost for `k` states.
    pub fn effective_kappa(&self, k: usize) -> f64 {
        match self.self_transition {
            // mean of the diagonal entry is (α + κ) / (Kα + κ)
            Some(d) => (self.alpha * (d * k as f64 - 1.0) / (1.0 - d)).max(0.0),
            None => self.kappa,
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(format!("infeasible separation spec: {m}")));
        if !(self.min_mean_distance >= 0.0 && self.min_mean_distance.is_finite()) {
            return bad(format!("min_mean_distance = {}", self.min_mean_distance));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {}", self.alpha));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa = {}", self.kappa));
        }
        if let Some(d) = self.self_transition {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("self_transition = {d}"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_class_tv) {
            return bad(format!("min_class_tv = {}", self.min_class_tv));
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return bad(format!("cov_scale = {}", self.cov_scale));
        }
        if !(self.g_scale >= 0.0 && self.g_scale.is_finite()) {
            return bad(format!("g_scale = {}", self.g_scale));
        }
        Ok(())
    }
}

/// A labeled synthetic dataset together with the model and state paths that
/// produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataset {
    #[serde(skip)]
    pub sequences: Vec<Sequence>,
    pub true_params: ModelParams,
    pub true_paths: Vec<Vec<usize>>,
    pub seed: u64,
}

pub(crate) fn standard_normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// One draw from `Dir(concentration)` via normalized Gamma variates.
pub fn sample_dirichlet(rng: &mut impl Rng, concentration: &[f64]) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = concentration
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.iter().map(|v| v / sum).collect();
        }
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: impl IntoIterator<Item = f64>) -> usize {
    let probs: Vec<f64> = probs.into_iter().collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
            if u < *p {
                return i;
            }
            u -= p;
        }
    }
    last
}

fn row_tv(a: &DMatrix<f64>, b: &DMatrix<f64>, row: usize) -> f64 {
    0.5 * a.row(row).iter().zip(b.row(row).iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `W = A Aᵀ / ν` with `A` a `D × ν` standard normal matrix, `ν = 2D + 2`.
fn wishart_like(rng: &mut impl Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let dof = 2 * d + 2;
    let a: DMatrix<f64> = DMatrix::from_fn(d, dof, |_, _| StandardNormal.sample(rng));
    let w = &a * a.transpose() * (scale / dof as f64);
    (&w + w.transpose()) * 0.5
}

/// Draws a ground-truth model for benchmarks.
pub fn sample_params(k: usize, d: usize, c: usize, spec: &SeparationSpec, seed: u64) -> Result<ModelParams> {
    spec.check()?;
    if k == 0 || d == 0 || c == 0 {
        return Err(Error::InvalidParameter("K, D and C must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa = spec.effective_kappa(k);
    let mut params = ModelParams::neutral(k, d, c, spec.alpha, kappa);

    // means: rejection sampling in a box whose volume grows with K
    let half_width = spec.min_mean_distance.max(1.0) * (k as f64).powf(1.0 / d as f64);
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k);
    for s in 0..k {
        let mut placed = None;
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let cand = DVector::from_fn(d, |_, _| rng.gen_range(-half_width..=half_width));
            if means.iter().all(|m| (m - &cand).norm() >= spec.min_mean_distance) {
                placed = Some(cand);
                break;
            }
        }
        means.push(placed.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "infeasible separation spec: could not place mean {s} at distance {} from the others",
                spec.min_mean_distance
            ))
        })?);
    }
    params.mu = means;
    params.sigma = (0..k).map(|_| wishart_like(&mut rng, d, spec.cov_scale)).collect();

    let mut accepted = None;
    for _ in 0..PI_ATTEMPTS {
        let pis: Vec<DMatrix<f64>> = (0..c)
            .map(|_| {
                let mut m = DMatrix::zeros(k, k);
                for row in 0..k {
                    let conc = crate::model::sticky_concentration(k, row, spec.alpha, kappa);
                    let draw = sample_dirichlet(&mut rng, &conc);
                    for (j, v) in draw.into_iter().enumerate() {
                        m[(row, j)] = v;
                    }
                }
                m
            })
            .collect();
        let separated = (0..c).all(|a| {
            (a + 1..c).all(|b| (0..k).all(|row| row_tv(&pis[a], &pis[b], row) >= spec.min_class_tv))
        });
        if separated {
            accepted = Some(pis);
            break;
        }
    }
    params.pi = accepted.ok_or_else(|| {
        Error::InvalidParameter(format!(
            "infeasible separation spec: no transition draw reached class TV {}",
            spec.min_class_tv
        ))
    })?;
    params.g = DMatrix::from_fn(k, d, |_, _| spec.g_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    params.validate()?;
    Ok(params)
}

/// Draws a state path and observations from class `c` using `rng`.
pub fn sample_sequence_with(
    params: &ModelParams,
    c: usize,
    t_len: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if c >= params.c {
        return Err(Error::Contract(format!("class index {c} out of range for C={}", params.c)));
    }
    let factors: Vec<DMatrix<f64>> = params
        .sigma
        .iter()
        .enumerate()
        .map(|(s, cov)| {
            Cholesky::new(cov.clone())
                .map(|ch| ch.l())
                .ok_or(Error::NotPositiveDefinite { state: s })
        })
        .collect::<Result<_>>()?;
    let mut x = DMatrix::zeros(t_len, params.d);
    let mut path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let z = if t == 0 {
            sample_categorical(rng, params.init_dist.iter().copied())
        } else {
            let prev = x.row(t - 1).transpose();
            let psi = recurrent_transition(params, c, &prev)?;
            sample_categorical(rng, psi.row(path[t - 1]).iter().copied())
        };
        let eps = standard_normal_vector(rng, params.d);
        let frame = &params.mu[z] + &factors[z] * eps;
        x.set_row(t, &frame.transpose());
        path.push(z);
    }
    Ok((x, path))
}

/// Draws one sequence of length `t_len` from class `c`.
pub fn sample_sequence(
    params: &ModelParams,
    c: usize,
    t_len: usize,
    seed: u64,
) -> Result<(Sequence, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, path) = sample_sequence_with(params, c, t_len, &mut rng)?;
    Ok((Sequence::new(format!("seq_{seed}"), x, Some(c))?, path))
}

/// `n` labeled sequences; sequence `i` uses stream `i` of the seed.
pub fn sample_dataset(params: &ModelParams, n: usize, t_len: usize, seed: u64) -> Result<SyntheticDataset> {
    params.validate()?;
    if t_len == 0 {
        return Err(Error::Input("sequence length must be at least 1".into()));
    }
    let draws: Vec<(Sequence, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = sample_categorical(&mut rng, params.class_prior.iter().copied());
            let (x, path) = sample_sequence_with(params, label, t_len, &mut rng)?;
            Ok((Sequence::new(format!("seq_{i:05}"), x, Some(label))?, path))
        })
        .collect::<Result<_>>()?;
    let (sequences, true_paths) = draws.into_iter().unzip();
    Ok(SyntheticDataset {
        sequences,
        true_params: params.clone(),
        true_paths,
        seed,
    })
}

/// Small random model plus sampled labeled sequences, for verification
/// harnesses. `G` is non-zero and all probabilities are strictly positive.
pub fn random_instance(
    k: usize,
    d: usize,
    c: usize,
    t_len: usize,
    n: usize,
    seed: u64,
) -> Result<(ModelParams, Vec<Sequence>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = rng.gen_range(0.5..2.0);
    let kappa = rng.gen_range(0.0..5.0);
    let mut p = ModelParams::neutral(k, d, c, alpha, kappa);
    p.mu = (0..k).map(|_| standard_normal_vector(&mut rng, d) * 1.5).collect();
    p.sigma = (0..k)
        .map(|_| wishart_like(&mut rng, d, 1.0) + DMatrix::identity(d, d) * 0.2)
        .collect();
    p.pi = (0..c)
        .map(|_| {
            let mut m = DMatrix::zeros(k, k);
            for row in 0..k {
                let draw = sample_dirichlet(&mut rng, &vec![1.5; k]);
                for (j, v) in draw.into_iter().enumerate() {
                    m[(row, j)] = v.max(1e-6);
                }
                let s: f64 = m.row(row).sum();
                m.row_mut(row).apply(|v| *v /= s);
            }
            m
        })
        .collect();
    p.g = DMatrix::from_fn(k, d, |_, _| 0.7 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    p.init_dist = sample_dirichlet(&mut rng, &vec![2.0; k]);
    p.validate()?;
    let seqs = (0..n)
        .map(|i| {
            let label = i % c;
            let (x, _) = sample_sequence_with(&p, label, t_len, &mut rng)?;
            Sequence::new(format!("r{i}"), x, Some(label))
        })
        .collect::<Result<_>>()?;
    Ok((p, seqs))
}

/// Minimum-cost assignment of rows to columns of a square cost matrix
/// (Hungarian algorithm). Returns `assignment[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Matches each true state to an estimated state minimizing the total
/// Euclidean distance between means. Returns `matching[true] = estimated`.
pub fn match_states(truth: &[DVector<f64>], estimate: &[DVector<f64>]) -> Vec<usize> {
    let cost = DMatrix::from_fn(truth.len(), estimate.len(), |i, j| (&truth[i] - &estimate[j]).norm());
    hungarian(&cost)
}

/// Largest per-dimension RMS error between matched true and estimated means.
pub fn mean_recovery_error(truth: &[DVector<f64>], estimate: &[DVector<f64>]) -> f64 {
    let matching = match_states(truth, estimate);
    truth
        .iter()
        .zip(&matching)
        .map(|(t, &j)| (t - &estimate[j]).norm() / (t.len() as f64).sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=5 {
            let cost = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..10.0));
            let got = hungarian(&cost);
            let got_cost: f64 = got.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum());
            });
            assert!((got_cost - best).abs() < 1e-12, "n={n}");
        }
    }

    fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
        if at == v.len() {
            f(v);
            return;
        }
        for i in at..v.len() {
            v.swap(at, i);
            permute(v, at + 1, f);
            v.swap(at, i);
        }
    }

    #[test]
    fn one_hot_chain_is_constant() {
        let mut p = ModelParams::neutral(3, 2, 1, 1.0, 0.0);
        p.pi[0] = DMatrix::identity(3, 3);
        p.init_dist = vec![0.0, 1.0, 0.0];
        let (_, path) = sample_sequence(&p, 0, 50, 4).unwrap();
        assert!(path.iter().all(|&z| z == 1));
    }

    #[test]
    fn tiny_covariance_pins_observations() {
        let mut p = ModelParams::neutral(2, 3, 1, 1.0, 0.0);
        p.mu[1] = DVector::from_vec(vec![5.0, -5.0, 1.0]);
        for s in &mut p.sigma {
            *s = DMatrix::identity(3, 3) * 1e-10;
        }
        let (seq, path) = sample_sequence(&p, 0, 200, 1).unwrap();
        for (t, &z) in path.iter().enumerate() {
            assert!((seq.frame(t) - &p.mu[z]).amax() < 1e-4);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SeparationSpec::default();
        let a = sample_params(4, 3, 2, &spec, 17).unwrap();
        let b = sample_params(4, 3, 2, &spec, 17).unwrap();
        assert_eq!(a, b);
        let da = sample_dataset(&a, 5, 20, 3).unwrap();
        let db = sample_dataset(&a, 5, 20, 3).unwrap();
        assert_eq!(da.sequences, db.sequences);
        assert_eq!(da.true_paths, db.true_paths);
    }

    #[test]
    fn empty_dataset() {
        let p = sample_params(2, 2, 2, &SeparationSpec::default(), 0).unwrap();
        let ds = sample_dataset(&p, 0, 10, 0).unwrap();
        assert!(ds.sequences.is_empty());
    }

    #[test]
    fn huge_kappa_makes_rows_sticky() {
        let spec = SeparationSpec {
            self_transition: None,
            kappa: 1e6,
            ..SeparationSpec::default()
        };
        let p = sample_params(4, 2, 2, &spec, 2).unwrap();
        for pi in &p.pi {
            for k in 0..4 {
                assert!(pi[(k, k)] > 0.99);
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SeparationSpec {
            min_class_tv: 0.99,
            ..SeparationSpec::default()
        };
        assert!(sample_params(3, 2, 2, &spec, 0).is_err());
        let spec = SeparationSpec {
            min_mean_distance: -1.0,
            ..SeparationSpec::default()
        };
        assert!(sample_params(3, 2, 2, &spec, 0).is_err());
    }

    #[test]
    fn effective_kappa_hits_target_mean() {
        let spec = SeparationSpec::default();
        let k = 4;
        let kappa = spec.effective_kappa(k);
        let mean = (spec.alpha + kappa) / (k as f64 * spec.alpha + kappa);
        assert!((mean - 0.9).abs() < 1e-12);
    }
}
