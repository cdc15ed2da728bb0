//! Bayes classification and latent-state summaries of a fitted model: state
//! utilization, dwell durations, transition matrices and covariance edge
//! lists, plus Table-style binary classification metrics.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{forward_backward_with, log_transitions};
use crate::learning::sequence_ecll;
use crate::model::{log_prior_pi, GaussianEmissions, ModelParams, Sequence};

/// Result of the Bayes classifier for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: usize,
    /// Expected complete-data log joint under each class's posterior.
    pub scores: Vec<f64>,
    /// True when another class attains the same maximal score; the lowest
    /// index wins.
    pub tie: bool,
}

/// `argmax_y E_{q_y}[log p(x, z, Π, y | G, θ)]` with a uniform class prior.
pub fn classify(params: &ModelParams, seq: &Sequence) -> Result<Classification> {
    let emissions = GaussianEmissions::new(params)?;
    classify_with(params, &emissions, seq)
}

pub(crate) fn classify_with(
    params: &ModelParams,
    emissions: &GaussianEmissions,
    seq: &Sequence,
) -> Result<Classification> {
    let mut prior = -(params.c as f64).ln();
    for c in 0..params.c {
        prior += log_prior_pi(params, c)?.value;
    }
    let scores = (0..params.c)
        .map(|y| {
            let post = forward_backward_with(params, emissions, y, seq)?;
            Ok(sequence_ecll(params, emissions, seq, &post)?.total() + prior)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (y, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = y;
        }
    }
    let tie = scores.iter().enumerate().any(|(y, s)| y != best && *s == scores[best]);
    Ok(Classification {
        class: best,
        scores,
        tie,
    })
}

/// Most probable state path and its log joint probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub states: Vec<usize>,
    pub log_score: f64,
}

/// Max-product decoding under the class-`c` time-varying chain.
pub fn viterbi(params: &ModelParams, c: usize, seq: &Sequence) -> Result<ViterbiPath> {
    let emissions = GaussianEmissions::new(params)?;
    viterbi_with(params, &emissions, c, seq)
}

pub(crate) fn viterbi_with(
    params: &ModelParams,
    emissions: &GaussianEmissions,
    c: usize,
    seq: &Sequence,
) -> Result<ViterbiPath> {
    if c >= params.c || seq.dim() != params.d {
        return Err(Error::Contract(format!(
            "viterbi: class {c} / dimension {} incompatible with C={}, D={}",
            seq.dim(),
            params.c,
            params.d
        )));
    }
    let k = params.k;
    let t_len = seq.len();
    let emit = emissions.table(seq);
    let log_psi = log_transitions(params, c, seq)?;
    let mut score: Vec<f64> = (0..k).map(|i| params.init_dist[i].ln() + emit[(0, i)]).collect();
    let mut back = vec![vec![0usize; k]; t_len];
    for t in 1..t_len {
        let lp = &log_psi[t - 1];
        let mut next = vec![f64::NEG_INFINITY; k];
        for i in 0..k {
            let mut arg = 0;
            let mut best = f64::NEG_INFINITY;
            for (j, s) in score.iter().enumerate() {
                let v = s + lp[(j, i)];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            next[i] = best + emit[(t, i)];
            back[t][i] = arg;
        }
        score = next;
    }
    let mut last = 0;
    for (i, s) in score.iter().enumerate() {
        if *s > score[last] {
            last = i;
        }
    }
    let log_score = score[last];
    let mut states = vec![last; t_len];
    for t in (1..t_len).rev() {
        states[t - 1] = back[t][states[t]];
    }
    Ok(ViterbiPath { states, log_score })
}

/// `(state, run length)` pairs of a path.
pub fn run_lengths(path: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &z in path {
        match runs.last_mut() {
            Some((s, n)) if *s == z => *n += 1,
            _ => runs.push((z, 1)),
        }
    }
    runs
}

/// How per-timestep state occupancy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// Posterior singleton marginals.
    #[default]
    Posterior,
    /// Viterbi-decoded paths.
    Viterbi,
}

/// Per-class state occupancy; rows of classes with no labeled sequences are
/// NaN and listed in `empty_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub source: StateSource,
    /// `C × K`, rows sum to 1.
    pub matrix: Vec<Vec<f64>>,
    pub empty_classes: Vec<usize>,
}

/// Average state occupancy per class over each labeled sequence's own-class
/// posterior (or decoded path), normalized per class.
pub fn state_utilization(params: &ModelParams, dataset: &[Sequence], source: StateSource) -> Result<Utilization> {
    let emissions = GaussianEmissions::new(params)?;
    let mut acc = DMatrix::<f64>::zeros(params.c, params.k);
    for seq in dataset {
        let Some(y) = seq.label else { continue };
        check_label(params, seq, y)?;
        match source {
            StateSource::Posterior => {
                let post = forward_backward_with(params, &emissions, y, seq)?;
                for t in 0..seq.len() {
                    for k in 0..params.k {
                        acc[(y, k)] += post.gamma[(t, k)];
                    }
                }
            }
            StateSource::Viterbi => {
                for z in viterbi_with(params, &emissions, y, seq)?.states {
                    acc[(y, z)] += 1.0;
                }
            }
        }
    }
    let mut empty_classes = Vec::new();
    let matrix = (0..params.c)
        .map(|c| {
            let total: f64 = acc.row(c).sum();
            if total > 0.0 {
                acc.row(c).iter().map(|v| v / total).collect()
            } else {
                empty_classes.push(c);
                vec![f64::NAN; params.k]
            }
        })
        .collect();
    Ok(Utilization {
        source,
        matrix,
        empty_classes,
    })
}

fn check_label(params: &ModelParams, seq: &Sequence, y: usize) -> Result<()> {
    if y >= params.c {
        return Err(Error::Contract(format!(
            "sequence {} has label {y} but the model has {} classes",
            seq.id, params.c
        )));
    }
    Ok(())
}

/// Dwell lengths `[class][state]` from run-length encoded Viterbi paths of
/// labeled sequences decoded under their own class.
pub fn dwell_durations(params: &ModelParams, dataset: &[Sequence]) -> Result<Vec<Vec<Vec<usize>>>> {
    let emissions = GaussianEmissions::new(params)?;
    let mut out = vec![vec![Vec::new(); params.k]; params.c];
    for seq in dataset {
        let Some(y) = seq.label else { continue };
        check_label(params, seq, y)?;
        let path = viterbi_with(params, &emissions, y, seq)?.states;
        for (state, len) in run_lengths(&path) {
            out[y][state].push(len);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEdge {
    pub state: usize,
    pub region_i: String,
    pub region_j: String,
    pub value: f64,
}

/// For each state, the `top_n` largest-magnitude off-diagonal covariances.
/// Exact zeros are omitted; ties are ordered by `(i, j)`.
pub fn covariance_edges(params: &ModelParams, region_names: &[String], top_n: usize) -> Result<Vec<Vec<CovarianceEdge>>> {
    if region_names.len() != params.d {
        return Err(Error::Contract(format!(
            "{} region names for D={}",
            region_names.len(),
            params.d
        )));
    }
    Ok(params
        .sigma
        .iter()
        .enumerate()
        .map(|(state, cov)| {
            let mut cells: Vec<(usize, usize, f64)> = Vec::new();
            for i in 0..params.d {
                for j in i + 1..params.d {
                    if cov[(i, j)] != 0.0 {
                        cells.push((i, j, cov[(i, j)]));
                    }
                }
            }
            cells.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
            cells
                .into_iter()
                .take(top_n)
                .map(|(i, j, value)| CovarianceEdge {
                    state,
                    region_i: region_names[i].clone(),
                    region_j: region_names[j].clone(),
                    value,
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

/// Binary classification metrics in percent. `None` marks a metric whose
/// denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub positive_class: usize,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion, positive_class: usize) -> Self {
        let Confusion { tp, fn_, tn, fp } = confusion;
        Metrics {
            confusion,
            positive_class,
            accuracy: percent(tp + tn, tp + tn + fp + fn_),
            sensitivity: percent(tp, tp + fn_),
            specificity: percent(tn, tn + fp),
            ppv: percent(tp, tp + fp),
            npv: percent(tn, tn + fn_),
        }
    }

    /// Names of metrics that are undefined.
    pub fn undefined(&self) -> Vec<&'static str> {
        [
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("ppv", self.ppv),
            ("npv", self.npv),
        ]
        .into_iter()
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Classifies every labeled sequence and scores the predictions one-vs-rest
/// against `positive_class`.
pub fn evaluate(params: &ModelParams, dataset: &[Sequence], positive_class: usize) -> Result<(Metrics, Vec<Classification>)> {
    if positive_class >= params.c {
        return Err(Error::Contract(format!(
            "positive class {positive_class} out of range for C={}",
            params.c
        )));
    }
    let emissions = GaussianEmissions::new(params)?;
    let mut confusion = Confusion::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let y = seq
            .label
            .ok_or_else(|| Error::Contract(format!("sequence {} is unlabeled", seq.id)))?;
        check_label(params, seq, y)?;
        let pred = classify_with(params, &emissions, seq)?;
        match (y == positive_class, pred.class == positive_class) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fn_ += 1,
            (false, false) => confusion.tn += 1,
            (false, true) => confusion.fp += 1,
        }
        predictions.push(pred);
    }
    Ok((Metrics::from_confusion(confusion, positive_class), predictions))
}

/// Everything the `analyze` command reports.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyticsReport {
    pub class_names: Vec<String>,
    pub utilization: Utilization,
    /// `[class][state]` dwell lengths in timesteps.
    pub durations: Vec<Vec<Vec<usize>>>,
    /// Row `k` of matrix `c` is the transition law out of state `k`.
    pub transition_matrices: Vec<Vec<Vec<f64>>>,
    pub covariance_edges: Vec<Vec<CovarianceEdge>>,
}

pub fn analyze(
    params: &ModelParams,
    dataset: &[Sequence],
    region_names: &[String],
    top_n: usize,
    source: StateSource,
) -> Result<AnalyticsReport> {
    Ok(AnalyticsReport {
        class_names: params.class_names.clone(),
        utilization: state_utilization(params, dataset, source)?,
        durations: dwell_durations(params, dataset)?,
        transition_matrices: params
            .pi
            .iter()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
        covariance_edges: covariance_edges(params, region_names, top_n)?,
    })
}

/// `state,region_i,region_j,value` rows for every state.
pub fn edges_csv(edges: &[Vec<CovarianceEdge>]) -> String {
    let mut out = String::from("state,region_i,region_j,value\n");
    for e in edges.iter().flatten() {
        let _ = writeln!(out, "{},{},{},{:?}", e.state, e.region_i, e.region_j, e.value);
    }
    out
}

/// Grayscale heatmap of a matrix with values in `[0, 1]`.
pub fn heatmap_svg(title: &str, matrix: &[Vec<f64>]) -> String {
    let cell = 24;
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let (w, h) = (cols * cell + 20, rows * cell + 40);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"10\" y=\"20\" font-size=\"12\">{}</text>\n",
        escape(title)
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},{shade})\"><title>{v:.4}</title></rect>",
                10 + j * cell,
                30 + i * cell
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart of per-class utilization.
pub fn utilization_svg(class_names: &[String], util: &Utilization) -> String {
    let k = util.matrix.first().map_or(0, Vec::len);
    let c = util.matrix.len();
    let bar = 12;
    let group = c * bar + 8;
    let height = 160;
    let (w, h) = (k * group + 20, height + 60);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"10\" y=\"16\" font-size=\"12\">state utilization</text>\n"
    );
    let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
    for (cls, row) in util.matrix.iter().enumerate() {
        for (state, v) in row.iter().enumerate() {
            let v = if v.is_finite() { *v } else { 0.0 };
            let bh = (v * height as f64).round() as usize;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{bar}\" height=\"{bh}\" fill=\"{}\"><title>{} state {state}: {v:.4}</title></rect>",
                10 + state * group + cls * bar,
                30 + height - bh,
                palette[cls % palette.len()],
                escape(class_names.get(cls).map_or("", String::as_str))
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn run_length_edge_cases() {
        assert_eq!(run_lengths(&[2; 7]), vec![(2, 7)]);
        assert_eq!(run_lengths(&[0, 1, 0, 1]), vec![(0, 1), (1, 1), (0, 1), (1, 1)]);
        assert!(run_lengths(&[]).is_empty());
    }

    #[test]
    fn confusion_fixture_metrics() {
        let m = Metrics::from_confusion(Confusion { tp: 10, fn_: 2, tn: 9, fp: 3 }, 1);
        let r = |v: Option<f64>| (v.unwrap() * 100.0).round() / 100.0;
        assert_eq!(r(m.accuracy), 79.17);
        assert_eq!(r(m.sensitivity), 83.33);
        assert_eq!(r(m.specificity), 75.0);
        assert_eq!(r(m.ppv), 76.92);
        assert_eq!(r(m.npv), 81.82);
    }

    #[test]
    fn empty_positive_class_is_undefined() {
        let m = Metrics::from_confusion(Confusion { tp: 0, fn_: 0, tn: 5, fp: 0 }, 1);
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.npv, Some(100.0));
        assert!(m.undefined().contains(&"sensitivity"));
    }

    #[test]
    fn single_class_always_wins() {
        let p = ModelParams::neutral(2, 1, 1, 1.0, 0.0);
        let s = Sequence::new("s", DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]), None).unwrap();
        assert_eq!(classify(&p, &s).unwrap().class, 0);
    }

    #[test]
    fn identical_classes_tie_to_zero() {
        let mut p = ModelParams::neutral(2, 1, 3, 0.5, 2.0);
        p.g = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        p.mu[1] = DVector::from_vec(vec![3.0]);
        let s = Sequence::new("s", DMatrix::from_row_slice(4, 1, &[0.0, 3.0, 2.5, 0.1]), None).unwrap();
        let r = classify(&p, &s).unwrap();
        assert_eq!(r.class, 0);
        assert!(r.tie);
        assert!(r.scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn one_hot_chain_decodes_uniquely() {
        let mut p = ModelParams::neutral(3, 1, 1, 1.0, 0.0);
        p.pi[0] = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        p.init_dist = vec![0.0, 1.0, 0.0];
        let s = Sequence::new("s", DMatrix::from_row_slice(5, 1, &[9.0, -3.0, 0.0, 4.0, 1.0]), None).unwrap();
        assert_eq!(viterbi(&p, 0, &s).unwrap().states, vec![1, 2, 0, 1, 2]);
    }

    #[test]
    fn edges_follow_magnitude() {
        let mut p = ModelParams::neutral(2, 3, 1, 1.0, 0.0);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(covariance_edges(&p, &names, 5).unwrap().iter().all(Vec::is_empty));
        p.sigma[1][(0, 2)] = -0.4;
        p.sigma[1][(2, 0)] = -0.4;
        let e = covariance_edges(&p, &names, 5).unwrap();
        assert_eq!(e[1].len(), 1);
        assert_eq!((e[1][0].region_i.as_str(), e[1][0].region_j.as_str(), e[1][0].value), ("a", "c", -0.4));
        assert!(covariance_edges(&p, &names[..2], 5).is_err());
    }

    #[test]
    fn utilization_rows_and_empty_classes() {
        let p = ModelParams::neutral(1, 1, 2, 1.0, 0.0);
        let s = Sequence::new("s", DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]), Some(0)).unwrap();
        let u = state_utilization(&p, &[s], StateSource::Posterior).unwrap();
        assert!((u.matrix[0][0] - 1.0).abs() < 1e-12);
        assert!(u.matrix[1][0].is_nan());
        assert_eq!(u.empty_classes, vec![1]);
    }

    #[test]
    fn evaluate_requires_labels() {
        let p = ModelParams::neutral(1, 1, 2, 1.0, 0.0);
        let s = Sequence::new("s", DMatrix::zeros(2, 1), None).unwrap();
        assert!(matches!(evaluate(&p, &[s], 1), Err(Error::Contract(_))));
    }
}
