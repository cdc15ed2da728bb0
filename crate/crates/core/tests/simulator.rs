use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use switchstate::io::sequence_csv;
use switchstate::simulator::{sample_dataset, sample_dirichlet, sample_params, sample_sequence, SeparationSpec};
use switchstate::ModelParams;

/// Kolmogorov–Smirnov statistic of `xs` against Uniform(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn flat_dirichlet_marginal_is_uniform() {
    let spec = SeparationSpec {
        alpha: 1.0,
        kappa: 0.0,
        self_transition: None,
        min_mean_distance: 0.5,
        ..SeparationSpec::default()
    };
    let params = sample_params(2, 1, 5000, &spec, 17).unwrap();
    let firsts: Vec<f64> = params.pi.iter().flat_map(|m| [m[(0, 0)], m[(1, 0)]]).collect();
    assert_eq!(firsts.len(), 10_000);
    // 1% critical value of the KS statistic
    let crit = 1.628 / (firsts.len() as f64).sqrt();
    assert!(ks_uniform(firsts) < crit);
}

#[test]
fn dirichlet_draws_have_the_right_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conc = [0.5, 2.0, 7.5];
    let n = 20_000;
    let mut mean = [0.0; 3];
    for _ in 0..n {
        let d = sample_dirichlet(&mut rng, &conc);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / n as f64;
        }
    }
    let total: f64 = conc.iter().sum();
    for (m, a) in mean.iter().zip(conc) {
        let p = a / total;
        let sd = (p * (1.0 - p) / (total + 1.0) / n as f64).sqrt();
        assert!((m - p).abs() < 5.0 * sd);
    }
}

fn transition_counts(path: &[usize], k: usize) -> DMatrix<f64> {
    let mut counts = DMatrix::zeros(k, k);
    for w in path.windows(2) {
        counts[(w[0], w[1])] += 1.0;
    }
    counts
}

#[test]
fn transitions_pass_chi_square_without_drive() {
    let spec = SeparationSpec { g_scale: 0.0, ..SeparationSpec::default() };
    let params = sample_params(3, 2, 2, &spec, 5).unwrap();
    assert!(params.g.iter().all(|v| *v == 0.0));
    for c in 0..2 {
        let (_, path) = sample_sequence(&params, c, 100_001, 40 + c as u64).unwrap();
        let counts = transition_counts(&path, 3);
        for row in 0..3 {
            let n: f64 = counts.row(row).sum();
            let stat: f64 = (0..3)
                .map(|j| {
                    let e = n * params.pi[c][(row, j)];
                    (counts[(row, j)] - e).powi(2) / e
                })
                .sum();
            let crit = ChiSquared::new(2.0).unwrap().inverse_cdf(0.99);
            assert!(stat < crit, "class {c} row {row}: {stat} >= {crit}");
        }
    }
}

#[test]
fn class_frequencies_follow_the_prior() {
    let mut params = sample_params(2, 1, 3, &SeparationSpec::default(), 2).unwrap();
    params.class_prior = vec![0.2, 0.5, 0.3];
    let n = 10_000;
    let data = sample_dataset(&params, n, 1, 9).unwrap();
    for (c, p) in params.class_prior.iter().enumerate() {
        let count = data.sequences.iter().filter(|s| s.label == Some(c)).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - n as f64 * p).abs() < 3.0 * sd);
    }
}

#[test]
fn single_state_frames_are_iid_gaussian() {
    let mut params = ModelParams::neutral(1, 2, 1, 1.0, 0.0);
    params.mu[0] = DVector::from_vec(vec![1.0, -2.0]);
    params.sigma[0] = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let data = sample_dataset(&params, 40, 500, 3).unwrap();
    let n = 40.0 * 500.0;
    let mut mean = DVector::zeros(2);
    for s in &data.sequences {
        for t in 0..s.len() {
            mean += s.frame(t) / n;
        }
    }
    let mut cov = DMatrix::zeros(2, 2);
    for s in &data.sequences {
        for t in 0..s.len() {
            let r = s.frame(t) - &mean;
            cov += &r * r.transpose() / n;
        }
    }
    for d in 0..2 {
        let sd = (params.sigma[0][(d, d)] / n).sqrt();
        assert!((mean[d] - params.mu[0][d]).abs() < 5.0 * sd);
        // var of a sample variance ≈ 2σ⁴/n
        let vsd = (2.0 / n).sqrt() * params.sigma[0][(d, d)];
        assert!((cov[(d, d)] - params.sigma[0][(d, d)]).abs() < 5.0 * vsd);
    }
    assert!(data.true_paths.iter().flatten().all(|&z| z == 0));
}

#[test]
fn dataset_is_byte_reproducible_and_order_independent() {
    let params = sample_params(3, 4, 2, &SeparationSpec::default(), 12).unwrap();
    let a = sample_dataset(&params, 6, 20, 77).unwrap();
    let b = sample_dataset(&params, 6, 20, 77).unwrap();
    let text = |d: &switchstate::simulator::SyntheticDataset| {
        d.sequences.iter().map(|s| sequence_csv(&s.x)).collect::<String>() + &serde_json::to_string(d).unwrap()
    };
    assert_eq!(text(&a), text(&b));
    // a longer run shares its prefix: each sequence has its own stream
    let c = sample_dataset(&params, 9, 20, 77).unwrap();
    for (x, y) in a.sequences.iter().zip(&c.sequences) {
        assert_eq!(x, y);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let d = pool.install(|| sample_dataset(&params, 6, 20, 77).unwrap());
    assert_eq!(text(&a), text(&d));
}

#[test]
fn huge_kappa_gives_sticky_rows() {
    let spec = SeparationSpec { kappa: 1e6, self_transition: None, ..SeparationSpec::default() };
    let params = sample_params(5, 2, 3, &spec, 4).unwrap();
    for m in &params.pi {
        for k in 0..5 {
            assert!(m[(k, k)] > 0.99);
        }
    }
}

#[test]
fn means_respect_minimum_distance() {
    let spec = SeparationSpec { min_mean_distance: 6.0, ..SeparationSpec::default() };
    let params = sample_params(6, 3, 1, &spec, 8).unwrap();
    for i in 0..6 {
        for j in i + 1..6 {
            assert!((&params.mu[i] - &params.mu[j]).norm() >= 6.0);
        }
    }
}
