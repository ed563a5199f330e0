use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{HveError, Result};
use crate::rng::Rng;

const ROW_TOL: f64 = 1e-9;

/// Stochastic tabular policy `pi(a|s)`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    n_states: usize,
    n_actions: usize,
    probs: Vec<Vec<f64>>,
}

impl TryFrom<PolicyFile> for TabularPolicy {
    type Error = HveError;
    fn try_from(f: PolicyFile) -> Result<Self> {
        if f.probs.len() != f.n_states {
            return Err(HveError::Distribution(format!(
                "policy has {} rows, expected {}",
                f.probs.len(),
                f.n_states
            )));
        }
        TabularPolicy::from_rows(f.probs)
    }
}

impl From<TabularPolicy> for PolicyFile {
    fn from(p: TabularPolicy) -> Self {
        PolicyFile {
            n_states: p.n_states,
            n_actions: p.n_actions,
            probs: p.probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TabularPolicy {
    pub fn from_flat(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || probs.len() != n_states * n_actions {
            return Err(HveError::Distribution(format!(
                "policy shape {n_states}x{n_actions} does not match {} entries",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_row(row).map_err(|e| HveError::Distribution(format!("policy row {s}: {e}")))?;
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(HveError::Distribution("ragged policy rows".into()));
        }
        Self::from_flat(n_states, n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            crate::error::check_index("action", a, n_actions)?;
            probs[s * n_actions + a] = 1.0;
        }
        Self::from_flat(actions.len(), n_actions, probs)
    }

    /// `(1 - eps) * greedy + eps * uniform`.
    pub fn epsilon_greedy(n_actions: usize, greedy: &[usize], eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(HveError::Config(format!("epsilon {eps} outside [0, 1]")));
        }
        let det = Self::deterministic(n_actions, greedy)?;
        let uni = Self::uniform(greedy.len(), n_actions);
        det.mix(&uni, 1.0 - eps)
    }

    /// Row-wise softmax of a logit table.
    pub fn from_logits(n_states: usize, n_actions: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), n_states * n_actions);
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / z));
        }
        TabularPolicy {
            n_states,
            n_actions,
            probs,
        }
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &TabularPolicy, lambda: f64) -> Result<Self> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(HveError::Config("cannot mix policies of different shapes".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
            .collect();
        Self::from_flat(self.n_states, self.n_actions, probs)
    }

    /// `floor + (1 - n_actions * floor) * pi`: every entry is at least
    /// `floor` and rows stay normalized. Requires `n_actions * floor < 1`.
    pub fn with_floor(&self, floor: f64) -> Self {
        let keep = 1.0 - self.n_actions as f64 * floor;
        assert!(keep > 0.0, "floor {floor} too large for {} actions", self.n_actions);
        let probs = self.probs.iter().map(|p| floor + keep * p).collect();
        TabularPolicy { probs, ..*self }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable action per state, lowest index on ties.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states)
            .map(|s| argmax(self.row(s)))
            .collect()
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.row(s), rng)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(format!("negative or non-finite entry in {row:?}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Inverse-CDF draw from a categorical row.
pub fn sample_categorical(row: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}
