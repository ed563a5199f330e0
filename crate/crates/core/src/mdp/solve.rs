use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{argmax, TabularMdp, TabularPolicy};
use crate::error::{HveError, Result};

/// State-action value table, row-major `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `V(s) = sum_a pi(a|s) Q(s, a)`.
    #[inline]
    pub fn state_value(&self, pi: &TabularPolicy, s: usize) -> f64 {
        self.row(s)
            .iter()
            .zip(pi.row(s))
            .map(|(q, p)| q * p)
            .sum()
    }

    /// `E_{s ~ rho0, a ~ pi}[Q(s, a)]`.
    pub fn initial_value(&self, pi: &TabularPolicy, rho0: &[f64]) -> f64 {
        rho0.iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(s, w)| w * self.state_value(pi, s))
            .sum()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Exact policy evaluation of `pi` on the kernel `transition` (`[s][a][s']`)
/// with expected rewards `reward` (`[s][a]`), by a direct linear solve of
/// `(I - gamma P_pi) V = r_pi` followed by one Bellman application.
pub fn evaluate_q(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
    reward: &[f64],
    pi: &TabularPolicy,
    gamma: f64,
) -> Result<QTable> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(HveError::Config(format!("gamma {gamma} must lie in [0, 1)")));
    }
    if pi.n_states() != n_states || pi.n_actions() != n_actions {
        return Err(HveError::Config("policy shape does not match kernel".into()));
    }
    let mut a_mat = DMatrix::<f64>::identity(n_states, n_states);
    let mut r_pi = DVector::<f64>::zeros(n_states);
    for s in 0..n_states {
        for a in 0..n_actions {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            let sa = s * n_actions + a;
            r_pi[s] += p * reward[sa];
            let row = &transition[sa * n_states..(sa + 1) * n_states];
            for (s2, &t) in row.iter().enumerate() {
                a_mat[(s, s2)] -= gamma * p * t;
            }
        }
    }
    let v = a_mat
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| HveError::Solve("singular Bellman system".into()))?;
    let mut q = QTable::zeros(n_states, n_actions);
    for sa in 0..n_states * n_actions {
        let row = &transition[sa * n_states..(sa + 1) * n_states];
        let ev: f64 = row.iter().zip(v.iter()).map(|(t, v)| t * v).sum();
        q.values[sa] = reward[sa] + gamma * ev;
    }
    Ok(q)
}

/// `Q^pi` of the true MDP, using expected rewards.
pub fn exact_q(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<QTable> {
    evaluate_q(
        mdp.n_states(),
        mdp.n_actions(),
        mdp.transition(),
        mdp.expected_rewards(),
        pi,
        mdp.gamma(),
    )
}

/// `J(pi) = E_{s ~ rho0, a ~ pi}[Q^pi(s, a)]`.
pub fn policy_value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    Ok(exact_q(mdp, pi)?.initial_value(pi, mdp.rho0()))
}

/// Normalized discounted state-action occupancy
/// `d(s, a) = (1 - gamma) sum_t gamma^t P(s_t = s) pi(a|s)`, row-major.
pub fn visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    // d^T (I - gamma P_pi) = (1 - gamma) rho0^T
    let mut a_mat = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (s2, &t) in mdp.t_row(s, a).iter().enumerate() {
                a_mat[(s2, s)] -= gamma * p * t;
            }
        }
    }
    let rhs = DVector::from_iterator(ns, mdp.rho0().iter().map(|r| (1.0 - gamma) * r));
    let d = a_mat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| HveError::Solve("singular occupancy system".into()))?;
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            out.push(d[s].max(0.0) * pi.prob(s, a));
        }
    }
    Ok(out)
}

/// Optimal deterministic policy by policy iteration (ties go to the lowest
/// action index), together with its Q table.
pub fn optimal_policy(mdp: &TabularMdp) -> Result<(TabularPolicy, QTable)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut actions = vec![0usize; ns];
    for _ in 0..10_000 {
        let pi = TabularPolicy::deterministic(na, &actions)?;
        let q = exact_q(mdp, &pi)?;
        let mut changed = false;
        for (s, cur) in actions.iter_mut().enumerate() {
            let row = q.row(s);
            let best = argmax(row);
            if row[best] > row[*cur] + 1e-12 {
                *cur = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((pi, q));
        }
    }
    Err(HveError::Solve("policy iteration did not converge".into()))
}

/// Total-variation distance `0.5 * sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)`; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}
