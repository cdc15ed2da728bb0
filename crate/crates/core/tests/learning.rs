use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switchstate::inference::{forward_backward, oracle_posterior};
use switchstate::learning::{
    e_step, ecll, em_fit, em_fit_from, em_init, grad_g, grad_pi, gradcheck, m_step_gaussian, softmax_rows, FitConfig,
};
use switchstate::simulator::{random_instance, sample_dataset, sample_params, SeparationSpec};
use switchstate::{emission_logpdf, log_prior_pi, recurrent_transition, ModelParams, Sequence};

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("c{i}")).collect()
}

fn small_problem(seed: u64) -> (ModelParams, Vec<Sequence>) {
    let spec = SeparationSpec::default();
    let truth = sample_params(3, 3, 2, &spec, seed).unwrap();
    let data = sample_dataset(&truth, 12, 40, seed + 100).unwrap();
    (truth, data.sequences)
}

#[test]
fn gradients_match_finite_differences() {
    let report = gradcheck(10, 3, 1e-5).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn gradients_on_a_larger_instance() {
    let (params, data) = random_instance(4, 3, 2, 8, 4, 99).unwrap();
    let posts = e_step(&params, &data).unwrap();
    let h = 1e-5;
    let g = grad_g(&params, &data, &posts).unwrap();
    for idx in [(0, 0), (1, 2), (3, 1)] {
        let f = |delta: f64| {
            let mut p = params.clone();
            p.g[idx] += delta;
            ecll(&p, &data, &posts).unwrap()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((g[idx] - fd).abs() < 1e-5 * fd.abs().max(1.0), "{idx:?}: {} vs {fd}", g[idx]);
    }
    let gp = grad_pi(&params, 1, &data, &posts).unwrap();
    let logits = params.pi[1].map(f64::ln);
    for idx in [(0, 0), (2, 3), (3, 1)] {
        let f = |delta: f64| {
            let mut p = params.clone();
            let mut l = logits.clone();
            l[idx] += delta;
            p.pi[1] = softmax_rows(&l);
            ecll(&p, &data, &posts).unwrap()
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((gp[idx] - fd).abs() < 1e-5 * fd.abs().max(1.0));
    }
}

#[test]
fn ecll_matches_term_by_term_sum() {
    let (params, data) = random_instance(2, 2, 2, 3, 2, 8).unwrap();
    let posts = e_step(&params, &data).unwrap();
    let mut expected = 0.0;
    for seq in &data {
        let y = seq.label.unwrap();
        let q = oracle_posterior(&params, y, seq).unwrap();
        for t in 0..seq.len() {
            let x = seq.frame(t);
            for i in 0..2 {
                expected += q.gamma[(t, i)] * emission_logpdf(&params, i, &x).unwrap();
            }
        }
        for i in 0..2 {
            expected += q.gamma[(0, i)] * params.init_dist[i].ln();
        }
        for t in 1..seq.len() {
            let psi = recurrent_transition(&params, y, &seq.frame(t - 1)).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    expected += q.xi[t - 1][(i, j)] * psi[(j, i)].ln();
                }
            }
        }
    }
    for c in 0..2 {
        expected += log_prior_pi(&params, c).unwrap().value;
    }
    let got = ecll(&params, &data, &posts).unwrap();
    assert!((got - expected).abs() < 1e-10 * expected.abs(), "{got} vs {expected}");
}

#[test]
fn e_step_matches_independent_calls() {
    let (params, data) = random_instance(3, 2, 2, 6, 4, 21).unwrap();
    let posts = e_step(&params, &data).unwrap();
    assert_eq!(posts.len(), 4);
    for (seq, row) in data.iter().zip(&posts) {
        assert_eq!(row.len(), 2);
        for (c, p) in row.iter().enumerate() {
            assert_eq!(p.class_index, c);
            let fb = forward_backward(&params, c, seq).unwrap();
            assert_eq!(p.gamma, fb.gamma);
            assert_eq!(p.log_evidence, fb.log_evidence);
        }
    }
}

fn emission_term(mu: &[DVector<f64>], sigma: &[DMatrix<f64>], base: &ModelParams, data: &[Sequence], gammas: &[DMatrix<f64>]) -> f64 {
    let mut p = base.clone();
    p.mu = mu.to_vec();
    p.sigma = sigma.to_vec();
    let mut total = 0.0;
    for (seq, g) in data.iter().zip(gammas) {
        for t in 0..seq.len() {
            for k in 0..p.k {
                total += g[(t, k)] * emission_logpdf(&p, k, &seq.frame(t)).unwrap();
            }
        }
    }
    total
}

#[test]
fn gaussian_step_maximizes_emission_term() {
    let (params, data) = small_problem(4);
    let posts = e_step(&params, &data).unwrap();
    let (mu, sigma, starved) = m_step_gaussian(&params, &data, &posts, 1e-9);
    assert_eq!(starved, 0);
    let gammas: Vec<DMatrix<f64>> = data
        .iter()
        .zip(&posts)
        .map(|(s, p)| p[s.label.unwrap()].gamma.clone())
        .collect();
    let best = emission_term(&mu, &sigma, &params, &data, &gammas);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let mut m2 = mu.clone();
        let mut s2 = sigma.clone();
        let k = rng.gen_range(0..3);
        let scale = 10f64.powf(rng.gen_range(-4.0..-1.0));
        m2[k] += DVector::from_fn(3, |_, _| rng.gen_range(-scale..scale));
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-scale..scale));
        let cand = &s2[k] + &a * a.transpose() - DMatrix::identity(3, 3) * (scale * scale * rng.gen::<f64>());
        if cand.clone().cholesky().is_some() {
            s2[k] = cand;
        }
        assert!(emission_term(&m2, &s2, &params, &data, &gammas) < best);
    }
    for s in &sigma {
        assert!(s.clone().cholesky().is_some());
    }
}

#[test]
fn hard_assignments_give_per_set_statistics() {
    let (params, data) = random_instance(2, 2, 1, 10, 1, 4).unwrap();
    let mut posts = e_step(&params, &data).unwrap();
    let post = &mut posts[0][0];
    let set: Vec<usize> = (0..10).filter(|t| t % 3 == 0).collect();
    for t in 0..10 {
        let on = set.contains(&t);
        post.gamma[(t, 0)] = if on { 1.0 } else { 0.0 };
        post.gamma[(t, 1)] = if on { 0.0 } else { 1.0 };
    }
    let (mu, _, _) = m_step_gaussian(&params, &data, &posts, 1e-9);
    let mean: DVector<f64> = set.iter().map(|&t| data[0].frame(t)).sum::<DVector<f64>>() / set.len() as f64;
    assert!((&mu[0] - mean).amax() < 1e-12);
}

#[test]
fn starved_state_keeps_its_parameters() {
    let (params, data) = random_instance(2, 2, 1, 6, 2, 5).unwrap();
    let mut posts = e_step(&params, &data).unwrap();
    for row in &mut posts {
        for p in row.iter_mut() {
            for t in 0..p.gamma.nrows() {
                p.gamma[(t, 0)] = 1.0;
                p.gamma[(t, 1)] = 0.0;
            }
        }
    }
    let (mu, sigma, starved) = m_step_gaussian(&params, &data, &posts, 1e-9);
    assert_eq!(starved, 1);
    assert_eq!(mu[1], params.mu[1]);
    assert_eq!(sigma[1], params.sigma[1]);
}

#[test]
fn disabled_gradient_steps_leave_transitions_at_init() {
    let (_, data) = small_problem(6);
    let config = FitConfig { k: 3, iterations: 1, eta: 0.0, ..FitConfig::default() };
    let init = em_init(&data, &names(2), &config).unwrap();
    let posts = e_step(&init.params, &data).unwrap();
    let (mu, sigma, _) = m_step_gaussian(&init.params, &data, &posts, init.cov_floor);
    let report = em_fit_from(&data, &config, init.clone()).unwrap();
    assert_eq!(report.iterations_run, 1);
    assert_eq!(report.objective_trace.len(), 2);
    assert_eq!(report.params.mu, mu);
    assert_eq!(report.params.sigma, sigma);
    assert_eq!(report.params.pi, init.params.pi);
    assert_eq!(report.params.g, init.params.g);
}

#[test]
fn objective_trace_never_decreases() {
    for seed in 0..3 {
        let (_, data) = small_problem(seed);
        let config = FitConfig { k: 3, iterations: 25, tol: 0.0, seed, ..FitConfig::default() };
        let report = em_fit(&data, &names(2), &config).unwrap();
        for w in report.objective_trace.windows(2) {
            let (a, b) = (w[0].objective, w[1].objective);
            assert!(b >= a - 1e-8 * a.abs(), "seed {seed}: {a} -> {b}");
        }
    }
}

#[test]
fn class_relabeling_permutes_transition_matrices() {
    let (_, data) = small_problem(9);
    let config = FitConfig { k: 3, iterations: 8, tol: 0.0, ..FitConfig::default() };
    let init = em_init(&data, &names(2), &config).unwrap();
    let swapped: Vec<Sequence> = data
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.label = s.label.map(|y| 1 - y);
            s
        })
        .collect();
    let mut init_swapped = init.clone();
    init_swapped.params.pi.swap(0, 1);
    init_swapped.pi_logits.swap(0, 1);
    init_swapped.params.class_prior.swap(0, 1);
    init_swapped.params.class_names.swap(0, 1);

    let a = em_fit_from(&data, &config, init).unwrap();
    let b = em_fit_from(&swapped, &config, init_swapped).unwrap();
    let close = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).amax() < 1e-8;
    assert!(close(&a.params.pi[0], &b.params.pi[1]));
    assert!(close(&a.params.pi[1], &b.params.pi[0]));
    assert!(close(&a.params.g, &b.params.g));
    for k in 0..3 {
        assert!((&a.params.mu[k] - &b.params.mu[k]).amax() < 1e-8);
        assert!(close(&a.params.sigma[k], &b.params.sigma[k]));
    }
}

#[test]
fn training_set_requirements() {
    let (_, mut data) = small_problem(2);
    let config = FitConfig { k: 2, iterations: 2, ..FitConfig::default() };
    assert!(em_fit(&data, &names(3), &config).is_err(), "class without sequences");
    data[0].label = None;
    assert!(em_fit(&data, &names(2), &config).is_err(), "unlabeled sequence");
    assert!(em_fit(&[], &names(2), &config).is_err());
}

#[test]
fn fit_is_reproducible() {
    let (_, data) = small_problem(1);
    let config = FitConfig { k: 3, iterations: 5, ..FitConfig::default() };
    let a = em_fit(&data, &names(2), &config).unwrap();
    let b = em_fit(&data, &names(2), &config).unwrap();
    assert_eq!(a.params, b.params);
    let objs = |r: &switchstate::FitReport| r.objective_trace.iter().map(|e| e.objective).collect::<Vec<_>>();
    assert_eq!(objs(&a), objs(&b));
}

#[test]
fn config_file_round_trip() {
    let text = r#"{"K": 4, "M": 20, "eta": 0.05}"#;
    let config: FitConfig = serde_json::from_str(text).unwrap();
    assert_eq!(config.k, 4);
    assert_eq!(config.iterations, 20);
    assert_eq!(config.inner_steps, 10);
    assert!(serde_json::from_str::<FitConfig>(r#"{"bogus": 1}"#).is_err());
    let back: FitConfig = serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
    assert_eq!(back, config);
}
