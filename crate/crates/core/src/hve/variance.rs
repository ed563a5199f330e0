//! Exact variance of the `H`-step (importance-weighted) data return,
//! split into reward noise and transition noise.
//!
//! The return `G = sum_{t=0}^{H} w(W_t) g^t r_t` is expanded as a Doob
//! martingale over the reveal order `r_0, (s_1, a_1), r_1, ..., r_H`. Each
//! increment's conditional variance is evaluated exactly by dynamic
//! programming over augmented nodes `(s, a, W)`, where `W` is the raw
//! cumulative ratio. Keeping `W` in the node makes the clipped case exact,
//! since clipping is not multiplicative.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::IsWeighting;
use crate::error::{check_index, HveError, Result};
use crate::mdp::{TabularMdp, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub var_rew: f64,
    pub var_trans: f64,
    /// `(var_rew + var_trans) / n`
    pub total: f64,
}

type Node = (usize, usize, u64);

/// Variance of the mean of `n` independent `H`-step returns from `(s, a)`
/// collected by `pi_beta` on `kernel`, reweighted toward `pi` as
/// `weighting` prescribes. With IS off every ratio is 1 and continuation
/// values follow `pi_beta`.
#[allow(clippy::too_many_arguments)]
pub fn variance_decomposition(
    kernel: &TabularMdp,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    s: usize,
    a: usize,
    h: usize,
    n: usize,
    weighting: IsWeighting,
) -> Result<VarianceDecomposition> {
    check_index("state", s, kernel.n_states())?;
    check_index("action", a, kernel.n_actions())?;
    if n == 0 {
        return Err(HveError::Config("trajectory count n must be at least 1".into()));
    }
    let gamma = kernel.gamma();
    let na = kernel.n_actions();

    // children of a node: ((s', a', W'), probability)
    let children = |node: &Node| -> Vec<(Node, f64)> {
        let (s, a, w_bits) = *node;
        let w = f64::from_bits(w_bits);
        let mut out = Vec::new();
        for (s2, &t) in kernel.t_row(s, a).iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for a2 in 0..na {
                let b = pi_beta.prob(s2, a2);
                if b == 0.0 {
                    continue;
                }
                let w2 = w * weighting.step_ratio(pi, pi_beta, s2, a2);
                out.push(((s2, a2, w2.to_bits()), t * b));
            }
        }
        out
    };

    // forward: reachable nodes and their probabilities per step
    let mut layers: Vec<BTreeMap<Node, f64>> = Vec::with_capacity(h + 1);
    layers.push(BTreeMap::from([((s, a, 1.0f64.to_bits()), 1.0)]));
    for t in 0..h {
        let mut next = BTreeMap::new();
        for (node, &p) in &layers[t] {
            for (child, q) in children(node) {
                *next.entry(child).or_insert(0.0) += p * q;
            }
        }
        layers.push(next);
    }

    // backward: continuation C(t, node) = E[sum_{k>=t} w_k g^k r_k | node at t]
    let disc = |t: usize| gamma.powi(t as i32);
    let mut cont_next: HashMap<Node, f64> = HashMap::new();
    let mut var_trans = 0.0;
    for t in (0..=h).rev() {
        let mut cont: HashMap<Node, f64> = HashMap::with_capacity(layers[t].len());
        for (node, &p) in &layers[t] {
            let (s, a, w_bits) = *node;
            let w = weighting.weight(f64::from_bits(w_bits));
            let mut c = w * disc(t) * kernel.reward_mean(s, a);
            if t < h {
                let kids = children(node);
                let mean: f64 = kids.iter().map(|(k, q)| q * cont_next[k]).sum();
                let var: f64 = kids.iter().map(|(k, q)| q * (cont_next[k] - mean).powi(2)).sum();
                var_trans += p * var;
                c += mean;
            }
            cont.insert(*node, c);
        }
        cont_next = cont;
    }

    let mut var_rew = 0.0;
    for (t, layer) in layers.iter().enumerate() {
        let d2 = disc(t) * disc(t);
        for (&(s, a, w_bits), &p) in layer {
            let w = weighting.weight(f64::from_bits(w_bits));
            var_rew += p * w * w * d2 * kernel.reward_variance(s, a);
        }
    }

    Ok(VarianceDecomposition {
        var_rew,
        var_trans,
        total: (var_rew + var_trans) / n as f64,
    })
}
