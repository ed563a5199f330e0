//! Brute-force verifiers. Each one simulates or enumerates directly from the
//! ground-truth MDP and shares no estimator code with the module it checks.

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::Result;
use crate::hve::{self, ErrorBoundTerms, IsWeighting};
use crate::learning::{DivergenceEstimates, LearnedModel};
use crate::mdp::{self, exact_q, TabularMdp, TabularPolicy};
use crate::par::{self, compensated_sum};
use crate::rng;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Upper bound on the discounted reward lost to truncation.
    pub tail_bound: f64,
    pub samples: usize,
}

impl McEstimate {
    /// `|mean - value| <= k * std_error + tail_bound`, with a tiny absolute
    /// slack for zero-variance cases.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error + self.tail_bound + 1e-12
    }
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn mc_returns(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: Option<(usize, usize)>,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    let gamma = mdp.gamma();
    let returns = par::map_indices(n_rollouts, |i| {
        let mut rng = rng::indexed_stream(seed, "mc-rollout", i as u64);
        mdp::rollout(mdp, policy, start, horizon, &mut rng).map(|t| {
            let mut g = 0.0;
            let mut d = 1.0;
            for st in &t.steps {
                g += d * st.reward;
                d *= gamma;
            }
            g
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (mean, std_error) = mean_and_se(&returns);
    Ok(McEstimate {
        mean,
        std_error,
        tail_bound: gamma.powi(horizon as i32) * mdp.r_max() / (1.0 - gamma),
        samples: n_rollouts,
    })
}

/// Mean discounted return of independent rollouts from `rho0`.
pub fn monte_carlo_value(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    mc_returns(mdp, policy, None, n_rollouts, horizon, seed)
}

/// Mean discounted return of independent rollouts forced to start at
/// `(s, a)`.
pub fn monte_carlo_q(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    s: usize,
    a: usize,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McEstimate> {
    mc_returns(mdp, policy, Some((s, a)), n_rollouts, horizon, seed)
}

/// Sample variance of a resampled estimator, with the standard error of
/// that variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariance {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub resamples: usize,
}

/// Draws `resamples` independent mini-datasets of `n` trajectories of
/// `h + 1` steps from `(s, a)` under `behavior`, evaluates the (weighted)
/// `H`-step data return average on each, and reports the sample variance
/// across mini-datasets.
#[allow(clippy::too_many_arguments)]
pub fn empirical_estimator_variance(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    pi: &TabularPolicy,
    s: usize,
    a: usize,
    h: usize,
    n: usize,
    resamples: usize,
    weighting: IsWeighting,
    seed: u64,
) -> Result<EmpiricalVariance> {
    let gamma = mdp.gamma();
    let estimates = par::map_indices(resamples, |i| -> Result<f64> {
        let mut rng = rng::indexed_stream(seed, "variance-resample", i as u64);
        let mut total = 0.0;
        for _ in 0..n {
            let traj = mdp::rollout(mdp, behavior, Some((s, a)), h + 1, &mut rng)?;
            let mut raw = 1.0;
            let mut g = 0.0;
            for (t, st) in traj.steps.iter().enumerate() {
                if t > 0 && weighting.use_is {
                    raw *= pi.prob(st.state, st.action) / behavior.prob(st.state, st.action);
                }
                let w = if !weighting.use_is {
                    1.0
                } else if let Some(eps) = weighting.clip_eps {
                    raw.clamp(1.0 - eps, 1.0 + eps)
                } else {
                    raw
                };
                g += w * gamma.powi(t as i32) * st.reward;
            }
            total += g;
        }
        Ok(total / n as f64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let r = resamples as f64;
    // shift by the first draw so identical draws give exactly zero
    let shift = estimates[0];
    let centered: Vec<f64> = estimates.iter().map(|x| x - shift).collect();
    let mean_c = compensated_sum(centered.iter().copied()) / r;
    let mean = shift + mean_c;
    let m2 = compensated_sum(centered.iter().map(|x| (x - mean_c).powi(2))) / r;
    let m4 = compensated_sum(centered.iter().map(|x| (x - mean_c).powi(4))) / r;
    let variance = m2 * r / (r - 1.0);
    // large-sample standard error of the sample variance
    let std_error = ((m4 - m2 * m2).max(0.0) / r).sqrt();
    Ok(EmpiricalVariance {
        mean,
        variance,
        std_error,
        resamples,
    })
}

/// Quantities of the chi-square / KL importance-ratio bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2KlCheck {
    /// `E_{s ~ w} E_{a ~ pi_beta}[rho^2]`
    pub expected_rho_sq: f64,
    /// `max pi / pi_beta` over weighted states
    pub c: f64,
    /// `E_{s ~ w} KL(pi || pi_beta)`
    pub kl: f64,
    /// `c * kl + 1`
    pub bound: f64,
    pub holds: bool,
}

/// Exact check of `E[rho^2] <= c * KL + 1` under the state weights.
pub fn chi2_kl_check(pi: &TabularPolicy, pi_beta: &TabularPolicy, state_weights: &[f64]) -> Chi2KlCheck {
    let mut chi2 = 0.0;
    let mut kl = 0.0;
    let mut c: f64 = 0.0;
    for (s, &w) in state_weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        for (&p, &b) in pi.row(s).iter().zip(pi_beta.row(s)) {
            if b == 0.0 {
                if p > 0.0 {
                    c = f64::INFINITY;
                    chi2 = f64::INFINITY;
                    kl = f64::INFINITY;
                }
                continue;
            }
            let r = p / b;
            c = c.max(r);
            // b (r^2 - 1) sums to the chi-square divergence since sum b = 1
            chi2 += w * b * (r - 1.0) * (r + 1.0);
            if p > 0.0 {
                kl += w * p * r.ln();
            }
        }
    }
    let expected_rho_sq = 1.0 + chi2;
    let bound = c * kl + 1.0;
    Chi2KlCheck {
        expected_rho_sq,
        c,
        kl,
        bound,
        holds: expected_rho_sq <= bound + 1e-12,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: i32,
    pub bound: ErrorBoundTerms,
    /// Dataset-weighted `|Q^pi - Q~|` against the exact solution.
    pub true_abs_error: f64,
}

/// For each `h`, the bound terms next to the true dataset-weighted error of
/// the hybrid Q table.
#[allow(clippy::too_many_arguments)]
pub fn bound_vs_error_sweep(
    mdp: &TabularMdp,
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    h_range: std::ops::RangeInclusive<i32>,
    weighting: IsWeighting,
    divergences: &DivergenceEstimates,
) -> Result<Vec<SweepRow>> {
    let truth = exact_q(mdp, pi)?;
    let q_hat = hve::model_q(model, pi, mdp.gamma())?;
    let weights = dataset.sa_frequencies();
    let mut rows = Vec::new();
    for h in h_range {
        let est = hve::hybrid_q(dataset, &q_hat, pi, pi_beta, h, mdp.gamma(), weighting)?;
        let err = weights
            .iter()
            .enumerate()
            .map(|(sa, w)| w * (truth.values[sa] - est.q.values[sa]).abs())
            .sum();
        rows.push(SweepRow {
            h,
            bound: hve::error_bound(h, divergences, mdp.gamma(), mdp.r_max(), weighting.surrogate_eps()),
            true_abs_error: err,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{policy_value, RewardSpec};
    use crate::scenarios;
    use rand::Rng as _;

    #[test]
    fn mc_self_loop_is_exact() {
        let one = RewardSpec::Deterministic { value: 1.0 };
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![one], vec![1.0], 0.9, 1.0).unwrap();
        let est = monte_carlo_value(&mdp, &TabularPolicy::uniform(1, 1), 100, 400, 0).unwrap();
        assert!((est.mean - 10.0).abs() < 1e-9);
        assert_eq!(est.std_error, 0.0);
        let zero = RewardSpec::Deterministic { value: 0.0 };
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![zero], vec![1.0], 0.9, 1.0).unwrap();
        assert_eq!(monte_carlo_value(&mdp, &TabularPolicy::uniform(1, 1), 10, 50, 0).unwrap().mean, 0.0);
    }

    #[test]
    fn mc_agrees_with_exact_on_random_mdps() {
        for seed in 0..10 {
            let mdp = scenarios::random_mdp(5, 2, 0.9, seed);
            let pi = TabularPolicy::uniform(5, 2);
            let est = monte_carlo_value(&mdp, &pi, 20_000, mdp.horizon_cap(), seed).unwrap();
            assert!(est.agrees_with(policy_value(&mdp, &pi).unwrap(), 3.0), "seed {seed}: {est:?}");
        }
    }

    #[test]
    fn chi2_identity_case() {
        let pi = TabularPolicy::from_rows(vec![vec![0.1, 0.2, 0.7], vec![0.3, 0.3, 0.4]]).unwrap();
        let check = chi2_kl_check(&pi, &pi, &[0.4, 0.6]);
        assert_eq!((check.expected_rho_sq, check.c, check.kl, check.bound), (1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn chi2_deterministic_on_support() {
        // pi picks action 1 with certainty; pi_beta(1) = 0.25 => E[rho^2] = 1/0.25
        let pi = TabularPolicy::deterministic(2, &[1]).unwrap();
        let beta = TabularPolicy::from_rows(vec![vec![0.75, 0.25]]).unwrap();
        let check = chi2_kl_check(&pi, &beta, &[1.0]);
        assert!((check.expected_rho_sq - 4.0).abs() < 1e-12);
        assert_eq!(check.c, 4.0);
        assert!((check.kl - 4.0f64.ln()).abs() < 1e-12);
        assert!(check.holds);
    }

    #[test]
    fn chi2_small_perturbation_exceeds_bound() {
        // chi2 = 0.04 while c * KL = 1.2 * 0.0201; near pi_beta the
        // chi-square divergence is about twice the KL divergence
        let pi = TabularPolicy::from_rows(vec![vec![0.6, 0.4]]).unwrap();
        let beta = TabularPolicy::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        let check = chi2_kl_check(&pi, &beta, &[1.0]);
        assert!((check.expected_rho_sq - 1.04).abs() < 1e-12);
        assert!((check.c - 1.2).abs() < 1e-12);
        let kl = 0.6 * 1.2f64.ln() + 0.4 * 0.8f64.ln();
        assert!((check.kl - kl).abs() < 1e-12);
        assert!(!check.holds);
    }

    #[test]
    fn chi2_matches_enumeration() {
        let mut rng = rng::stream(1, "fuzz");
        for _ in 0..500 {
            let na = 2 + rng.random_range(0..4);
            let row = |rng: &mut rng::Rng| {
                let raw: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let (p, b) = (row(&mut rng), row(&mut rng));
            let rho_sq: f64 = p.iter().zip(&b).map(|(p, b)| b * (p / b).powi(2)).sum();
            let kl: f64 = p.iter().zip(&b).map(|(p, b)| p * (p / b).ln()).sum();
            let pi = TabularPolicy::from_rows(vec![p]).unwrap();
            let beta = TabularPolicy::from_rows(vec![b]).unwrap();
            let check = chi2_kl_check(&pi, &beta, &[1.0]);
            assert!((check.expected_rho_sq - rho_sq).abs() < 1e-9);
            assert!((check.kl - kl).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_variance_is_zero_when_deterministic() {
        let r = RewardSpec::Deterministic { value: 0.5 };
        let t = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let mdp = TabularMdp::new(2, 2, t, vec![r; 4], vec![1.0, 0.0], 0.9, 1.0).unwrap();
        let pi = TabularPolicy::deterministic(2, &[0, 1]).unwrap();
        let v = empirical_estimator_variance(&mdp, &pi, &pi, 0, 0, 3, 4, 200, IsWeighting::OFF, 0).unwrap();
        assert_eq!(v.variance, 0.0);
    }

    #[test]
    fn empirical_variance_bernoulli_h0() {
        let r = RewardSpec::Bernoulli { p: 0.3 };
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![r], vec![1.0], 0.9, 2.0).unwrap();
        let pi = TabularPolicy::uniform(1, 1);
        let v = empirical_estimator_variance(&mdp, &pi, &pi, 0, 0, 0, 5, 100_000, IsWeighting::OFF, 3).unwrap();
        let expected = 0.3 * 0.7 * 4.0 / 5.0;
        assert!((v.variance - expected).abs() < 3.0 * v.std_error, "{v:?} vs {expected}");
    }
}
