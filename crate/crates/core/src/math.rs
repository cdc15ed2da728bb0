//! Small numeric helpers shared across modules.

/// `ln Σ exp(v_i)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `0 · ln 0 = 0` convention used by expectations over posteriors that
/// place zero mass on impossible transitions.
#[inline]
pub(crate) fn weighted_log(weight: f64, log_value: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * log_value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_on_small_values() {
        let v = [0.1, -2.0, 1.5];
        let naive: f64 = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_survives_large_magnitudes() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
