//! Exact class-conditional posterior inference under the time-varying
//! transition matrices `Ψ^{(t)}`.
//!
//! Time convention: the transition into `z_t` (0-based `t ≥ 1`) is governed by
//! `Ψ` built from `x_{t-1}`; `z_0` is drawn from `init_dist`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::{
    emission_logpdf, log_transition_from_drive, recurrent_transition, GaussianEmissions,
    ModelParams, Sequence,
};

/// Singleton and two-slice posterior marginals for one (sequence, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `T × K`, row `t` is `q_c(z_t)`.
    pub gamma: DMatrix<f64>,
    /// `T - 1` slices; `xi[t][(i, j)] = q_c(z_{t+1} = i, z_t = j)`, i.e. the
    /// row is the destination and the column the source state.
    pub xi: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
    pub class_index: usize,
}

impl Posterior {
    /// Largest violation of the normalization and marginal-consistency
    /// invariants.
    pub fn consistency_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in self.gamma.row_iter() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
        for (t, slice) in self.xi.iter().enumerate() {
            worst = worst.max((slice.sum() - 1.0).abs());
            // summing out the source reproduces q(z_{t+1})
            for i in 0..slice.nrows() {
                let m: f64 = slice.row(i).sum();
                worst = worst.max((m - self.gamma[(t + 1, i)]).abs());
            }
            // summing out the destination reproduces q(z_t)
            for j in 0..slice.ncols() {
                let m: f64 = slice.column(j).sum();
                worst = worst.max((m - self.gamma[(t, j)]).abs());
            }
        }
        worst
    }
}

fn check_sequence(params: &ModelParams, c: usize, seq: &Sequence) -> Result<()> {
    if c >= params.c {
        return Err(Error::Contract(format!(
            "class index {c} out of range for C={}",
            params.c
        )));
    }
    if seq.dim() != params.d {
        return Err(Error::Contract(format!(
            "sequence {} has dimension {}, model expects D={}",
            seq.id,
            seq.dim(),
            params.d
        )));
    }
    Ok(())
}

/// `log Ψ^{(t)}` for every transition of a sequence; entry `t - 1` governs
/// the move into `z_t`.
pub(crate) fn log_transitions(
    params: &ModelParams,
    c: usize,
    seq: &Sequence,
) -> Result<Vec<DMatrix<f64>>> {
    (1..seq.len())
        .map(|t| {
            let drive = &params.g * seq.frame(t - 1);
            log_transition_from_drive(&params.pi[c], &drive, c).map_err(|e| e.at(t))
        })
        .collect()
}

/// Forward-backward with log-space messages. Runs in `O(T·K² + T·K·D²)`.
pub fn forward_backward(params: &ModelParams, c: usize, seq: &Sequence) -> Result<Posterior> {
    let emissions = GaussianEmissions::new(params)?;
    forward_backward_with(params, &emissions, c, seq)
}

/// Forward-backward reusing precomputed emission factors.
pub fn forward_backward_with(
    params: &ModelParams,
    emissions: &GaussianEmissions,
    c: usize,
    seq: &Sequence,
) -> Result<Posterior> {
    check_sequence(params, c, seq)?;
    let emit = emissions.table(seq);
    let log_psi = log_transitions(params, c, seq)?;
    Ok(run_messages(params, c, &emit, &log_psi))
}

pub(crate) fn run_messages(
    params: &ModelParams,
    c: usize,
    emit: &DMatrix<f64>,
    log_psi: &[DMatrix<f64>],
) -> Posterior {
    let k = params.k;
    let t_len = emit.nrows();
    let mut la = DMatrix::from_element(t_len, k, f64::NEG_INFINITY);
    let mut lb = DMatrix::zeros(t_len, k);
    let mut buf = vec![0.0; k];

    for i in 0..k {
        la[(0, i)] = params.init_dist[i].ln() + emit[(0, i)];
    }
    for t in 1..t_len {
        let lp = &log_psi[t - 1];
        for i in 0..k {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = la[(t - 1, j)] + lp[(j, i)];
            }
            la[(t, i)] = log_sum_exp(&buf) + emit[(t, i)];
        }
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        let lp = &log_psi[t];
        for j in 0..k {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = lp[(j, i)] + emit[(t + 1, i)] + lb[(t + 1, i)];
            }
            lb[(t, j)] = log_sum_exp(&buf);
        }
    }

    let last: Vec<f64> = la.row(t_len - 1).iter().copied().collect();
    let log_evidence = log_sum_exp(&last);

    let gamma = DMatrix::from_fn(t_len, k, |t, i| (la[(t, i)] + lb[(t, i)] - log_evidence).exp());
    let xi = (0..t_len.saturating_sub(1))
        .map(|t| {
            let lp = &log_psi[t];
            DMatrix::from_fn(k, k, |i, j| {
                (la[(t, j)] + lp[(j, i)] + emit[(t + 1, i)] + lb[(t + 1, i)] - log_evidence).exp()
            })
        })
        .collect();

    Posterior {
        gamma,
        xi,
        log_evidence,
        class_index: c,
    }
}

/// Maximum number of state paths [`oracle_posterior`] will enumerate.
pub const ORACLE_PATH_LIMIT: f64 = 1e6;

/// Posterior computed by summing the explicit joint over every state path.
/// Intended for verification on tiny instances.
pub fn oracle_posterior(params: &ModelParams, c: usize, seq: &Sequence) -> Result<Posterior> {
    check_sequence(params, c, seq)?;
    let (k, t_len) = (params.k, seq.len());
    let paths = (k as f64).powi(t_len as i32);
    if paths > ORACLE_PATH_LIMIT {
        return Err(Error::TooLarge {
            paths,
            limit: ORACLE_PATH_LIMIT,
        });
    }
    let n_paths = paths as usize;

    let mut emit = vec![vec![0.0; k]; t_len];
    for (t, row) in emit.iter_mut().enumerate() {
        let x = seq.frame(t);
        for (s, e) in row.iter_mut().enumerate() {
            *e = emission_logpdf(params, s, &x).map_err(|e| e.at(t))?;
        }
    }
    let psi: Vec<DMatrix<f64>> = (1..t_len)
        .map(|t| recurrent_transition(params, c, &seq.frame(t - 1)).map_err(|e| e.at(t)))
        .collect::<Result<_>>()?;

    let decode = |mut idx: usize, path: &mut [usize]| {
        for z in path.iter_mut() {
            *z = idx % k;
            idx /= k;
        }
    };

    let mut path = vec![0usize; t_len];
    let mut joint = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        decode(p, &mut path);
        let mut lj = params.init_dist[path[0]].ln() + emit[0][path[0]];
        for t in 1..t_len {
            lj += psi[t - 1][(path[t - 1], path[t])].ln() + emit[t][path[t]];
        }
        joint.push(lj);
    }
    let log_evidence = log_sum_exp(&joint);

    let mut gamma = DMatrix::zeros(t_len, k);
    let mut xi = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
    for (p, lj) in joint.iter().enumerate() {
        let w = (lj - log_evidence).exp();
        if w == 0.0 {
            continue;
        }
        decode(p, &mut path);
        for t in 0..t_len {
            gamma[(t, path[t])] += w;
            if t + 1 < t_len {
                xi[t][(path[t + 1], path[t])] += w;
            }
        }
    }
    Ok(Posterior {
        gamma,
        xi,
        log_evidence,
        class_index: c,
    })
}

/// `log p(x_{1:T} | class c)` for every class.
pub fn log_likelihood(params: &ModelParams, seq: &Sequence) -> Result<Vec<f64>> {
    let emissions = GaussianEmissions::new(params)?;
    (0..params.c)
        .map(|c| forward_backward_with(params, &emissions, c, seq).map(|p| p.log_evidence))
        .collect()
}
