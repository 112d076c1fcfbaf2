//! Log-domain helpers and the central-difference gradient checker.

use crate::scalar::Scalar;

/// `log(sum(exp(values)))`, shifted by the maximum so large magnitudes do not
/// overflow. Empty input (or all `-inf`) is the log of zero probability.
pub fn log_sum_exp<S: Scalar>(values: &[S]) -> S {
    let max = values.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return S::neg_infinity();
    }
    if max == S::infinity() {
        return S::infinity();
    }
    let sum: S = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-term `log_sum_exp` for the hot recursions.
#[inline]
pub fn log_add<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let norm = log_sum_exp(logits);
    logits.iter().map(|&v| v - norm).collect()
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let norm = log_sum_exp(logits);
    logits.iter().map(|&v| (v - norm).exp()).collect()
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// coordinate of `point`.
pub fn finite_diff_grad<S, F>(mut f: F, point: &[S], eps: S) -> Vec<S>
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    let mut x = point.to_vec();
    let two_eps = eps + eps;
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / two_eps
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`, the measure
/// used for every gradient comparison in the toolkit.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm_a = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm_a.max(norm_n).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_examples() {
        let q = 0.25f64.ln();
        assert!((log_sum_exp(&[q, q, q]) - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[0.0f64]), 0.0);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 1.5]), 1.5);
    }

    #[test]
    fn log_add_matches_log_sum_exp() {
        for (a, b) in [(0.3, -2.0), (-700.0, -699.0), (5.0, f64::NEG_INFINITY)] {
            assert!((log_add(a, b) - log_sum_exp(&[a, b])).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_examples() {
        let half = 0.5f64.ln();
        assert_eq!(log_softmax(&[0.0f64, 0.0]), vec![half, half]);
        for v in log_softmax(&[5.0f64, 5.0, 5.0]) {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        let out = log_softmax(&[0.0f64, 3.0f64.ln()]);
        assert!((out[0] - 0.25f64.ln()).abs() < 1e-15);
        assert!((out[1] - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_: &[f64]| 4.2, &[1.0, -2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn log_sum_exp_is_stable_and_bounded(values in prop::collection::vec(-700.0f64..700.0, 1..12)) {
            let out = log_sum_exp(&values);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.is_finite());
            prop_assert!(out >= max);
            prop_assert!(out <= max + (values.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn log_softmax_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let a = log_softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = log_softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!(log_sum_exp(&a).abs() <= 1e-12);
        }
    }
}
