use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::{covariance_scale, floor_covariance, gmm_init};
use super::objective::TransitionStats;
use super::{FitConfig, MAX_HALVINGS};
use crate::error::{Error, Result};
use crate::inference::{forward_backward_with, Posterior};
use crate::model::{log_prior_pi, GaussianEmissions, ModelParams, Sequence};

const INIT_LOGIT_NOISE: f64 = 0.01;
const STARVATION_WEIGHT: f64 = 1e-8;

/// One row of the objective trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Penalized observed-data log-likelihood at the start of the iteration.
    pub objective: f64,
    pub e_seconds: f64,
    pub m_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    /// One entry per E-step; the last entry scores the returned parameters.
    pub objective_trace: Vec<TraceEntry>,
    pub params: ModelParams,
    pub e_step_seconds: f64,
    pub m_step_seconds: f64,
    pub converged: bool,
    /// Number of completed M-steps.
    pub iterations_run: usize,
    /// Inner line searches that found no non-decreasing step.
    pub rejected_steps: usize,
    /// State updates skipped because the state had no posterior mass.
    pub starved_updates: usize,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().map_or(f64::NAN, |e| e.objective)
    }
}

/// Starting point of EM: parameters plus the unconstrained transition logits.
#[derive(Debug, Clone)]
pub struct InitialModel {
    pub params: ModelParams,
    pub pi_logits: Vec<DMatrix<f64>>,
    /// Absolute eigenvalue floor for covariance updates.
    pub cov_floor: f64,
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.apply(|v| *v /= sum);
    }
    out
}

fn check_training_set(dataset: &[Sequence], num_classes: usize) -> Result<usize> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Input("training set is empty".into()))?;
    let d = first.dim();
    let mut counts = vec![0usize; num_classes];
    for seq in dataset {
        if seq.dim() != d {
            return Err(Error::Input(format!(
                "sequence {} has dimension {}, expected {d}",
                seq.id,
                seq.dim()
            )));
        }
        match seq.label {
            Some(y) if y < num_classes => counts[y] += 1,
            Some(y) => {
                return Err(Error::Input(format!(
                    "sequence {} has label {y} but there are {num_classes} classes",
                    seq.id
                )))
            }
            None => return Err(Error::Input(format!("sequence {} is unlabeled", seq.id))),
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {c} has no training sequences")));
    }
    Ok(d)
}

/// GMM-initialized emissions, `G = 0`, and transition logits jittered around
/// the mean of the sticky prior. Class `c` draws its jitter from its own
/// random stream.
pub fn em_init(dataset: &[Sequence], class_names: &[String], config: &FitConfig) -> Result<InitialModel> {
    config.validate()?;
    let num_classes = class_names.len();
    if num_classes == 0 {
        return Err(Error::Input("at least one class is required".into()));
    }
    let d = check_training_set(dataset, num_classes)?;
    let k = config.k;
    let (mu, sigma) = gmm_init(dataset, k, config.seed, config.cov_floor)?;
    let cov_floor = config.cov_floor * covariance_scale(dataset);

    let denom = k as f64 * config.alpha + config.kappa;
    let pi_logits: Vec<DMatrix<f64>> = (0..num_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64 + 1);
            DMatrix::from_fn(k, k, |i, j| {
                let mean = if i == j { config.alpha + config.kappa } else { config.alpha } / denom;
                let noise: f64 = StandardNormal.sample(&mut rng);
                mean.ln() + INIT_LOGIT_NOISE * noise
            })
        })
        .collect();

    let mut params = ModelParams::neutral(k, d, num_classes, config.alpha, config.kappa);
    params.mu = mu;
    params.sigma = sigma;
    params.pi = pi_logits.iter().map(softmax_rows).collect();
    let n = dataset.len() as f64;
    params.class_prior = (0..num_classes)
        .map(|c| dataset.iter().filter(|s| s.label == Some(c)).count() as f64 / n)
        .collect();
    params.class_names = class_names.to_vec();
    params.validate()?;
    Ok(InitialModel {
        params,
        pi_logits,
        cov_floor,
    })
}

/// Class-conditional posteriors for every (sequence, class) pair, indexed
/// `[n][c]`. Pairs are evaluated in parallel; the result order is fixed.
pub fn e_step(params: &ModelParams, dataset: &[Sequence]) -> Result<Vec<Vec<Posterior>>> {
    let emissions = GaussianEmissions::new(params)?;
    let pairs: Vec<(usize, usize)> = (0..dataset.len())
        .flat_map(|n| (0..params.c).map(move |c| (n, c)))
        .collect();
    let flat: Vec<Posterior> = pairs
        .par_iter()
        .map(|&(n, c)| forward_backward_with(params, &emissions, c, &dataset[n]))
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<Posterior>> = Vec::with_capacity(dataset.len());
    let mut it = flat.into_iter();
    for _ in 0..dataset.len() {
        out.push(it.by_ref().take(params.c).collect());
    }
    Ok(out)
}

fn labeled_posterior<'a>(seq: &Sequence, posts: &'a [Posterior]) -> Option<&'a Posterior> {
    seq.label.and_then(|y| posts.iter().find(|p| p.class_index == y))
}

/// Weighted Gaussian MLE per state using each labeled sequence's own-class
/// singleton marginals. States with no mass keep their current parameters.
/// Returns the new means, covariances and the number of starved states.
pub fn m_step_gaussian(
    params: &ModelParams,
    dataset: &[Sequence],
    posteriors: &[Vec<Posterior>],
    cov_floor: f64,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, usize) {
    let (k, d) = (params.k, params.d);
    let mut weight = vec![0.0; k];
    let mut first = vec![DVector::zeros(d); k];
    for (seq, posts) in dataset.iter().zip(posteriors) {
        let Some(post) = labeled_posterior(seq, posts) else { continue };
        for t in 0..seq.len() {
            let x = seq.frame(t);
            for s in 0..k {
                let w = post.gamma[(t, s)];
                weight[s] += w;
                first[s].axpy(w, &x, 1.0);
            }
        }
    }
    let mut mu = params.mu.clone();
    let mut sigma = params.sigma.clone();
    let mut starved = 0;
    let mut active = vec![false; k];
    for s in 0..k {
        if weight[s] < STARVATION_WEIGHT {
            log::warn!("state {s} received total weight {:.3e}; keeping its parameters", weight[s]);
            starved += 1;
        } else {
            mu[s] = &first[s] / weight[s];
            active[s] = true;
        }
    }
    let mut scatter = vec![DMatrix::zeros(d, d); k];
    for (seq, posts) in dataset.iter().zip(posteriors) {
        let Some(post) = labeled_posterior(seq, posts) else { continue };
        for t in 0..seq.len() {
            let x = seq.frame(t);
            for s in (0..k).filter(|&s| active[s]) {
                let r = &x - &mu[s];
                scatter[s].ger(post.gamma[(t, s)], &r, &r, 1.0);
            }
        }
    }
    for s in (0..k).filter(|&s| active[s]) {
        sigma[s] = floor_covariance(&(&scatter[s] / weight[s]), cov_floor);
    }
    (mu, sigma, starved)
}

fn penalized_objective(params: &ModelParams, dataset: &[Sequence], posteriors: &[Vec<Posterior>]) -> Result<f64> {
    let mut total = 0.0;
    for (seq, posts) in dataset.iter().zip(posteriors) {
        if let Some(post) = labeled_posterior(seq, posts) {
            total += post.log_evidence;
        }
    }
    for c in 0..params.c {
        total += log_prior_pi(params, c)?.value;
    }
    Ok(total)
}

fn non_finite_detail(params: &ModelParams, dataset: &[Sequence], posteriors: &[Vec<Posterior>]) -> String {
    let mut parts = Vec::new();
    for (seq, posts) in dataset.iter().zip(posteriors) {
        if let Some(post) = labeled_posterior(seq, posts) {
            if !post.log_evidence.is_finite() {
                parts.push(format!("sequence {} log-evidence {}", seq.id, post.log_evidence));
            }
        }
    }
    for c in 0..params.c {
        match log_prior_pi(params, c) {
            Ok(v) if !v.value.is_finite() => parts.push(format!("class {c} prior {}", v.value)),
            _ => {}
        }
    }
    if parts.is_empty() {
        "no single offending term identified".into()
    } else {
        parts.join("; ")
    }
}

/// Runs EM from the default initialization.
pub fn em_fit(dataset: &[Sequence], class_names: &[String], config: &FitConfig) -> Result<FitReport> {
    let init = em_init(dataset, class_names, config)?;
    em_fit_from(dataset, config, init)
}

/// Runs EM from a caller-supplied initialization.
pub fn em_fit_from(dataset: &[Sequence], config: &FitConfig, init: InitialModel) -> Result<FitReport> {
    config.validate()?;
    init.params.validate()?;
    check_training_set(dataset, init.params.c)?;
    let InitialModel {
        mut params,
        mut pi_logits,
        cov_floor,
    } = init;

    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    let mut rejected_steps = 0;
    let mut starved_updates = 0;
    let (mut e_total, mut m_total) = (0.0, 0.0);

    for iteration in 0..=config.iterations {
        let started = Instant::now();
        let posteriors = e_step(&params, dataset)?;
        let objective = penalized_objective(&params, dataset, &posteriors)?;
        let e_seconds = started.elapsed().as_secs_f64();
        e_total += e_seconds;
        if !objective.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: non_finite_detail(&params, dataset, &posteriors),
            });
        }
        let previous = trace.last().map(|e| e.objective);
        trace.push(TraceEntry {
            iteration,
            objective,
            e_seconds,
            m_seconds: 0.0,
        });
        log::debug!("iteration {iteration}: objective {objective:.6}");
        if let Some(prev) = previous {
            let rel = (objective - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < config.tol {
                converged = true;
                break;
            }
        }
        if iteration == config.iterations {
            break;
        }

        let started = Instant::now();
        let (mu, sigma, starved) = m_step_gaussian(&params, dataset, &posteriors, cov_floor);
        params.mu = mu;
        params.sigma = sigma;
        starved_updates += starved;

        if config.eta > 0.0 {
            let stats = TransitionStats::new(&params, dataset, &posteriors)?;
            let mut drives = stats.drives(&params.g);
            // line searches resume from the last accepted step size, capped at eta
            let mut g_step = config.eta;
            let mut pi_step = vec![config.eta; params.c];
            // with the drive pinned at zero the Π-step has a closed form
            let mut exact = vec![false; params.c];
            if config.freeze_g && params.g.iter().all(|v| *v == 0.0) {
                for c in 0..params.c {
                    exact[c] = exact_pi(&mut params, &mut pi_logits, c, &stats, &drives)?;
                }
            }
            for _ in 0..config.inner_steps {
                if !config.freeze_g && !step_g(&mut params, &stats, &mut drives, config.eta, &mut g_step)? {
                    rejected_steps += 1;
                }
                for c in (0..params.c).filter(|&c| !exact[c]) {
                    if !step_pi(&mut params, &mut pi_logits, c, &stats, &drives, config.eta, &mut pi_step[c])? {
                        rejected_steps += 1;
                    }
                }
            }
        }
        let m_seconds = started.elapsed().as_secs_f64();
        m_total += m_seconds;
        if let Some(last) = trace.last_mut() {
            last.m_seconds = m_seconds;
        }
        iterations_run += 1;
    }

    params.validate()?;
    Ok(FitReport {
        objective_trace: trace,
        params,
        e_step_seconds: e_total,
        m_step_seconds: m_total,
        converged,
        iterations_run,
        rejected_steps,
        starved_updates,
    })
}

/// One backtracking ascent step on `G`. Returns false when every trial step
/// would lower the objective (and leaves `G` unchanged).
fn step_g(
    params: &mut ModelParams,
    stats: &TransitionStats,
    drives: &mut Vec<DMatrix<f64>>,
    eta: f64,
    last: &mut f64,
) -> Result<bool> {
    let base = stats.objective(params, drives, None)?;
    let grad = stats.grad_g(params, drives);
    if grad.iter().all(|v| *v == 0.0) {
        return Ok(true);
    }
    let start = params.g.clone();
    let mut step = (2.0 * *last).min(eta);
    for _ in 0..=MAX_HALVINGS {
        params.g = &start + &grad * step;
        let trial = stats.drives(&params.g);
        let value = stats.objective(params, &trial, None)?;
        if value.is_finite() && value >= base {
            *drives = trial;
            *last = step;
            return Ok(true);
        }
        step *= 0.5;
    }
    params.g = start;
    Ok(false)
}

/// Replaces `Π_c` by its closed-form MAP update if that does not lower the
/// objective (it can only do so through the clamped prior).
fn exact_pi(
    params: &mut ModelParams,
    logits: &mut [DMatrix<f64>],
    c: usize,
    stats: &TransitionStats,
    drives: &[DMatrix<f64>],
) -> Result<bool> {
    let Some(pi) = stats.map_pi(params, c) else { return Ok(false) };
    let base = stats.objective(params, drives, Some(c))?;
    let previous = std::mem::replace(&mut params.pi[c], pi);
    let value = stats.objective(params, drives, Some(c))?;
    if value.is_finite() && value >= base {
        logits[c] = params.pi[c].map(f64::ln);
        Ok(true)
    } else {
        params.pi[c] = previous;
        Ok(false)
    }
}

fn step_pi(
    params: &mut ModelParams,
    logits: &mut [DMatrix<f64>],
    c: usize,
    stats: &TransitionStats,
    drives: &[DMatrix<f64>],
    eta: f64,
    last: &mut f64,
) -> Result<bool> {
    let base = stats.objective(params, drives, Some(c))?;
    let grad = stats.grad_pi(params, c, drives);
    if grad.iter().all(|v| *v == 0.0) {
        return Ok(true);
    }
    let start_logits = logits[c].clone();
    let start_pi = params.pi[c].clone();
    let mut step = (2.0 * *last).min(eta);
    for _ in 0..=MAX_HALVINGS {
        let trial = &start_logits + &grad * step;
        params.pi[c] = softmax_rows(&trial);
        let value = stats.objective(params, drives, Some(c))?;
        if value.is_finite() && value >= base {
            logits[c] = trial;
            *last = step;
            return Ok(true);
        }
        step *= 0.5;
    }
    params.pi[c] = start_pi;
    Ok(false)
}
