//! Empirical-Bayes Gaussian mixture initialization of the emission
//! parameters: k-means++ seeding, then a fixed schedule of diagonal and full
//! covariance EM on frames pooled across all sequences.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::Sequence;

const KMEANS_RESTARTS: usize = 5;
const KMEANS_MAX_ITERS: usize = 100;
const DIAGONAL_ITERS: usize = 25;
const FULL_ITERS: usize = 25;
const MIN_WEIGHT: f64 = 1e-8;

/// Mean per-dimension variance of all pooled frames, or 1 when the data has
/// no spread. Relative covariance floors are expressed in this unit.
pub fn covariance_scale(dataset: &[Sequence]) -> f64 {
    let frames = pooled_frames(dataset);
    if frames.len() < 2 {
        return 1.0;
    }
    let d = frames[0].len();
    let n = frames.len() as f64;
    let mean = frames.iter().fold(DVector::zeros(d), |acc, f| acc + f) / n;
    let var: f64 = frames.iter().map(|f| (f - &mean).norm_squared()).sum::<f64>() / (n * d as f64);
    if var > 0.0 && var.is_finite() {
        var
    } else {
        1.0
    }
}

/// Symmetrizes `cov` and raises every eigenvalue to at least `floor`.
pub fn floor_covariance(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (&out + out.transpose()) * 0.5
}

fn pooled_frames(dataset: &[Sequence]) -> Vec<DVector<f64>> {
    dataset
        .iter()
        .flat_map(|s| (0..s.len()).map(move |t| s.frame(t)))
        .collect()
}

/// Initial emission means and covariances from a GMM fit to pooled frames.
pub fn gmm_init(
    dataset: &[Sequence],
    k: usize,
    seed: u64,
    cov_floor: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let frames = pooled_frames(dataset);
    let Some(first) = frames.first() else {
        return Err(Error::Init("dataset has no frames".into()));
    };
    let d = first.len();
    if k == 0 {
        return Err(Error::Init("K must be positive".into()));
    }
    if frames.len() < k * (d + 1) {
        return Err(Error::Init(format!(
            "{} pooled frames is fewer than K·(D+1) = {}",
            frames.len(),
            k * (d + 1)
        )));
    }
    let floor = cov_floor * covariance_scale(dataset);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, centers) = kmeans(&frames, k, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    let mut means = best.map(|(_, c)| c).unwrap_or_default();

    // hard assignment gives the starting covariances and weights
    let assign = assign(&frames, &means);
    let mut weights = vec![0.0; k];
    let mut covs = vec![DMatrix::zeros(d, d); k];
    for (f, &a) in frames.iter().zip(&assign) {
        weights[a] += 1.0;
        let r = f - &means[a];
        covs[a] += &r * r.transpose();
    }
    let global = floor_covariance(&pooled_covariance(&frames), floor);
    for s in 0..k {
        covs[s] = if weights[s] > 1.0 {
            floor_covariance(&(&covs[s] / weights[s]), floor)
        } else {
            global.clone()
        };
        weights[s] = (weights[s] / frames.len() as f64).max(MIN_WEIGHT);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    for iter in 0..DIAGONAL_ITERS + FULL_ITERS {
        let diagonal = iter < DIAGONAL_ITERS;
        gmm_em_step(&frames, &mut weights, &mut means, &mut covs, floor, diagonal)?;
    }
    Ok((means, covs))
}

fn pooled_covariance(frames: &[DVector<f64>]) -> DMatrix<f64> {
    let d = frames[0].len();
    let n = frames.len() as f64;
    let mean = frames.iter().fold(DVector::zeros(d), |acc, f| acc + f) / n;
    frames
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, f| {
            let r = f - &mean;
            acc + &r * r.transpose()
        })
        / n
}

fn assign(frames: &[DVector<f64>], centers: &[DVector<f64>]) -> Vec<usize> {
    frames
        .iter()
        .map(|f| {
            centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (f - c).norm_squared()))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0
        })
        .collect()
}

fn kmeans(frames: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<DVector<f64>>) {
    let n = frames.len();
    let mut centers = vec![frames[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = frames.iter().map(|f| (f - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(frames[idx].clone());
        let c = centers.last().unwrap();
        for (d, f) in dist.iter_mut().zip(frames) {
            *d = d.min((f - c).norm_squared());
        }
    }

    let dim = frames[0].len();
    let mut labels = assign(frames, &centers);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (f, &l) in frames.iter().zip(&labels) {
            sums[l] += f;
            counts[l] += 1;
        }
        for s in 0..k {
            if counts[s] > 0 {
                centers[s] = &sums[s] / counts[s] as f64;
            }
        }
        let next = assign(frames, &centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = frames
        .iter()
        .zip(&labels)
        .map(|(f, &l)| (f - &centers[l]).norm_squared())
        .sum();
    (inertia, centers)
}

fn gmm_em_step(
    frames: &[DVector<f64>],
    weights: &mut [f64],
    means: &mut [DVector<f64>],
    covs: &mut [DMatrix<f64>],
    floor: f64,
    diagonal: bool,
) -> Result<()> {
    let k = weights.len();
    let d = means[0].len();
    let mut factors = Vec::with_capacity(k);
    let mut log_norm = Vec::with_capacity(k);
    for (s, cov) in covs.iter().enumerate() {
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite { state: s })?;
        let half_log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        log_norm.push(weights[s].ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - half_log_det);
        factors.push(chol);
    }

    let mut resp_sum = vec![0.0; k];
    let mut mean_acc = vec![DVector::zeros(d); k];
    let mut resp = Vec::with_capacity(frames.len());
    let mut buf = vec![0.0; k];
    for f in frames {
        for s in 0..k {
            let mut r = f - &means[s];
            factors[s].l_dirty().solve_lower_triangular_mut(&mut r);
            buf[s] = log_norm[s] - 0.5 * r.norm_squared();
        }
        let z = log_sum_exp(&buf);
        let r: Vec<f64> = buf.iter().map(|v| (v - z).exp()).collect();
        for s in 0..k {
            resp_sum[s] += r[s];
            mean_acc[s].axpy(r[s], f, 1.0);
        }
        resp.push(r);
    }

    let n = frames.len() as f64;
    for s in 0..k {
        if resp_sum[s] < MIN_WEIGHT {
            continue;
        }
        means[s] = &mean_acc[s] / resp_sum[s];
        let mut scatter = DMatrix::zeros(d, d);
        for (f, r) in frames.iter().zip(&resp) {
            let dev = f - &means[s];
            if diagonal {
                for i in 0..d {
                    scatter[(i, i)] += r[s] * dev[i] * dev[i];
                }
            } else {
                scatter.ger(r[s], &dev, &dev, 1.0);
            }
        }
        covs[s] = floor_covariance(&(scatter / resp_sum[s]), floor);
        weights[s] = resp_sum[s] / n;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}
