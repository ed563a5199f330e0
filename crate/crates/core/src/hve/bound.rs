//! Closed-form error-bound terms and automatic step-length selection.

use serde::{Deserialize, Serialize};

use crate::learning::DivergenceEstimates;

/// Coefficient of the policy-divergence bias term:
/// `(1 - g^(h+1)) / (1 - g)^2 - (h + 1) g^(h+1) / (1 - g)`.
/// Equals `sum_{t=0}^{h} (t + 1) g^t`, so `f(-1) = 0` and `f(0) = 1`.
pub fn f_coefficient(gamma: f64, h: i32) -> f64 {
    assert!(h >= -1, "step length must be >= -1");
    let gh1 = gamma.powi(h + 1);
    let one_minus = 1.0 - gamma;
    (1.0 - gh1) / (one_minus * one_minus) - f64::from(h + 1) * gh1 / one_minus
}

/// Model-based value-error bound
/// `2 g R (2 eps_pi + eps_m) / (1 - g)^2 + 4 R eps_pi / (1 - g)`.
pub fn eps_model_model_hat(eps_pi: f64, eps_m: f64, gamma: f64, r_max: f64) -> f64 {
    let one_minus = 1.0 - gamma;
    2.0 * gamma * r_max * (2.0 * eps_pi + eps_m) / (one_minus * one_minus)
        + 4.0 * r_max * eps_pi / one_minus
}

/// `min(max(rho, 1 - eps), 1 + eps)`.
#[inline]
pub fn clip_ratio(rho: f64, eps: f64) -> f64 {
    rho.max(1.0 - eps).min(1.0 + eps)
}

/// Upper bound on the clipped-IS H-step return variance:
/// `(1 + eps)^2 sum_{t=0}^{h} g^(2t) R^2 / 4`.
pub fn variance_surrogate(gamma: f64, r_max: f64, clip_eps: f64, h: i32) -> f64 {
    if h < 0 {
        return 0.0;
    }
    let g2 = gamma * gamma;
    let mut sum = 0.0;
    let mut pow = 1.0;
    for _ in 0..=h {
        sum += pow;
        pow *= g2;
    }
    (1.0 + clip_eps).powi(2) * sum * r_max * r_max / 4.0
}

/// The three terms of the refined error bound at one step length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundTerms {
    pub h: i32,
    /// Square root of the variance surrogate.
    pub var_term: f64,
    /// `f(h) R eps'_pi`
    pub bias_term: f64,
    /// `g^(h+1) eps_{M, M^}`
    pub model_term: f64,
    pub eps_pi: f64,
    pub eps_m: f64,
    pub eps_mm: f64,
    pub total: f64,
}

/// Evaluates the bound at `h`. `clip_eps` is the ratio clipping width used
/// in the variance surrogate (0 when importance sampling is off).
pub fn error_bound(h: i32, div: &DivergenceEstimates, gamma: f64, r_max: f64, clip_eps: f64) -> ErrorBoundTerms {
    let eps_mm = eps_model_model_hat(div.eps_pi, div.eps_m, gamma, r_max);
    let var_term = variance_surrogate(gamma, r_max, clip_eps, h).sqrt();
    let bias_term = f_coefficient(gamma, h) * r_max * div.eps_pi_clipped;
    let model_term = gamma.powi(h + 1) * eps_mm;
    ErrorBoundTerms {
        h,
        var_term,
        bias_term,
        model_term,
        eps_pi: div.eps_pi,
        eps_m: div.eps_m,
        eps_mm,
        total: var_term + bias_term + model_term,
    }
}

/// Bound terms for every `h` in `-1..=h_max`.
pub fn bound_curve(div: &DivergenceEstimates, gamma: f64, r_max: f64, clip_eps: f64, h_max: usize) -> Vec<ErrorBoundTerms> {
    (-1..=h_max as i32)
        .map(|h| error_bound(h, div, gamma, r_max, clip_eps))
        .collect()
}

/// Index of the smallest value; the earliest wins ties.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Step length in `-1..=h_max` minimizing the bound, preferring the
/// smallest `h` on ties.
pub fn select_h(div: &DivergenceEstimates, gamma: f64, r_max: f64, clip_eps: f64, h_max: usize) -> i32 {
    let totals: Vec<f64> = bound_curve(div, gamma, r_max, clip_eps, h_max)
        .iter()
        .map(|t| t.total)
        .collect();
    argmin_first(&totals) as i32 - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::DivergenceMode;

    fn div(eps_pi: f64, eps_m: f64) -> DivergenceEstimates {
        DivergenceEstimates::new(eps_pi, eps_m, DivergenceMode::Empirical)
    }

    /// `sum_{t=0}^{h} (t + 1) g^t`, an independent route to `f(h)`.
    fn f_by_series(gamma: f64, h: i32) -> f64 {
        (0..=h).map(|t| f64::from(t + 1) * gamma.powi(t)).sum()
    }

    #[test]
    fn f_coefficient_values() {
        assert_eq!(f_coefficient(0.9, -1), 0.0);
        for g in [0.1, 0.5, 0.9, 0.99] {
            assert!((f_coefficient(g, 0) - 1.0).abs() < 1e-9);
            for h in 0..30 {
                let rel = (f_coefficient(g, h) - f_by_series(g, h)).abs() / f_by_series(g, h);
                assert!(rel < 1e-9, "g={g} h={h}");
            }
        }
        // 46.8559 - 31.88646
        assert!((f_coefficient(0.9, 5) - 14.96944).abs() < 1e-4);
    }

    #[test]
    fn eps_mm_values() {
        assert_eq!(eps_model_model_hat(0.0, 0.0, 0.9, 1.0), 0.0);
        // 2*0.9*0.25/0.01 + 0.4/0.1 = 45 + 4
        assert!((eps_model_model_hat(0.1, 0.05, 0.9, 1.0) - 49.0).abs() < 1e-9);
        let one = eps_model_model_hat(0.07, 0.2, 0.95, 1.0);
        assert!((eps_model_model_hat(0.07, 0.2, 0.95, 2.0) - 2.0 * one).abs() < 1e-9);
    }

    #[test]
    fn clip_examples() {
        for eps in [0.0, 0.1, 0.5] {
            assert_eq!(clip_ratio(1.0, eps), 1.0);
        }
        assert!((clip_ratio(1.5, 0.1) - 1.1).abs() < 1e-15);
        assert_eq!(clip_ratio(0.2, 0.0), 1.0);
        assert_eq!(clip_ratio(7.0, 0.0), 1.0);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(variance_surrogate(0.9, 1.0, 0.1, -1), 0.0);
        assert!((variance_surrogate(0.9, 2.0, 0.0, 0) - 1.0).abs() < 1e-15);
        let expected = 1.1f64.powi(2) * (1.0 + 0.81 + 0.6561) / 4.0;
        assert!((variance_surrogate(0.9, 1.0, 0.1, 2) - expected).abs() < 1e-12);
        assert!((expected - 0.74599525).abs() < 1e-12);
    }

    #[test]
    fn bound_degenerates_at_minus_one() {
        let d = div(0.13, 0.27);
        let b = error_bound(-1, &d, 0.93, 1.5, 0.1);
        assert_eq!(b.var_term, 0.0);
        assert_eq!(b.bias_term, 0.0);
        assert_eq!(b.total, eps_model_model_hat(0.13, 0.27, 0.93, 1.5));
        assert_eq!(b.total, b.var_term + b.bias_term + b.model_term);
    }

    #[test]
    fn perfect_model_selects_minus_one() {
        assert_eq!(select_h(&div(0.0, 0.0), 0.99, 1.0, 0.1, 10), -1);
    }

    #[test]
    fn ties_go_to_smallest() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), 1);
        assert_eq!(argmin_first(&[1.0, 1.0]), 0);
    }

    #[test]
    fn interior_minimum_on_poor_model() {
        // the bias term saturates at R eps_pi / (1 - g)^2 while the model term
        // keeps decaying, so the minimum sits where the decay has flattened
        let d = div(0.2, 0.2);
        let curve = bound_curve(&d, 0.6, 1.0, 0.1, 20);
        let totals: Vec<f64> = curve.iter().map(|c| c.total).collect();
        let brute = argmin_first(&totals);
        assert!(brute > 0 && brute < totals.len() - 1, "argmin at index {brute}");
        assert_eq!(select_h(&d, 0.6, 1.0, 0.1, 20), brute as i32 - 1);
        assert!(totals[0] > totals[brute] && totals[totals.len() - 1] > totals[brute]);
    }
}
