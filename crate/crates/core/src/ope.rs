//! Off-policy evaluation: OPHVE, the four baselines (FQE, model-based,
//! weighted IS, weighted doubly robust) and the ranking metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{HveError, Result};
use crate::hve::{self, HveConfig};
use crate::learning::LearnedModel;
use crate::mdp::{policy_value, QTable, TabularMdp, TabularPolicy};
use crate::par;

/// OPHVE estimate together with the step length it used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OphveValue {
    pub value: f64,
    pub h: i32,
}

/// `E_{s ~ rho0, a ~ pi} Q~(s, a)`, exact over the tabular `rho0` and `pi`.
pub fn ophve_value(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    cfg: &HveConfig,
    rho0: &[f64],
) -> Result<OphveValue> {
    let est = hve::hve_estimate(dataset, model, pi, pi_beta, cfg)?;
    Ok(OphveValue {
        value: est.q.initial_value(pi, rho0),
        h: est.h,
    })
}

/// `E_{rho0, pi}` of the in-model Q table.
pub fn mb_value(model: &LearnedModel, pi: &TabularPolicy, gamma: f64, rho0: &[f64]) -> Result<f64> {
    Ok(hve::model_q(model, pi, gamma)?.initial_value(pi, rho0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeResult {
    pub value: f64,
    pub q: QTable,
    pub iterations: usize,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    pub converged: bool,
}

/// Tabular fitted-Q evaluation. Each sweep replaces `Q(s, a)` by the mean
/// of `r + g E_{a' ~ pi} Q(s', a')` over the logged transitions from
/// `(s, a)`; unvisited pairs stay at 0.
pub fn fqe_value(
    dataset: &OfflineDataset,
    pi: &TabularPolicy,
    gamma: f64,
    rho0: &[f64],
    iters: usize,
    tol: f64,
) -> Result<FqeResult> {
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let mut reward = vec![0.0; ns * na];
    let mut next = vec![0.0; ns * na * ns];
    let counts = dataset.sa_counts();
    for st in dataset.steps() {
        let sa = st.state * na + st.action;
        let n = counts[sa] as f64;
        reward[sa] += st.reward / n;
        next[sa * ns + st.next_state] += 1.0 / n;
    }
    let mut q = QTable::zeros(ns, na);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < iters {
        let v: Vec<f64> = (0..ns).map(|s| q.state_value(pi, s)).collect();
        let mut delta: f64 = 0.0;
        let mut updated = QTable::zeros(ns, na);
        for sa in 0..ns * na {
            if counts[sa] == 0 {
                continue;
            }
            let row = &next[sa * ns..(sa + 1) * ns];
            let target = reward[sa] + gamma * row.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
            delta = delta.max((target - q.values[sa]).abs());
            updated.values[sa] = target;
        }
        q = updated;
        iterations += 1;
        residual = delta;
        if residual <= tol {
            break;
        }
    }
    Ok(FqeResult {
        value: q.initial_value(pi, rho0),
        q,
        iterations,
        residual,
        converged: residual <= tol,
    })
}

/// Importance-sampling flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsVariant {
    /// One cumulative ratio per trajectory, self-normalized.
    #[default]
    PerTrajectory,
    /// Cumulative ratio per step, self-normalized per step.
    PerDecision,
}

fn ratio(pi: &TabularPolicy, pi_beta: &TabularPolicy, s: usize, a: usize) -> f64 {
    let (p, b) = (pi.prob(s, a), pi_beta.prob(s, a));
    if b > 0.0 {
        p / b
    } else if p == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Cumulative ratios `w[i][t] = prod_{k<=t} rho_k` for every trajectory.
fn cumulative_ratios(dataset: &OfflineDataset, pi: &TabularPolicy, pi_beta: &TabularPolicy) -> Vec<Vec<f64>> {
    dataset
        .trajectories()
        .iter()
        .map(|traj| {
            let mut w = 1.0;
            traj.steps
                .iter()
                .map(|st| {
                    w *= ratio(pi, pi_beta, st.state, st.action);
                    w
                })
                .collect()
        })
        .collect()
}

/// Per-step self-normalized weights; `None` where every live weight is 0.
fn normalized_step_weights(weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let horizon = weights.iter().map(Vec::len).max().unwrap_or(0);
    let mut totals = vec![0.0; horizon];
    for w in weights {
        for (t, x) in w.iter().enumerate() {
            totals[t] += x;
        }
    }
    weights
        .iter()
        .map(|w| {
            w.iter()
                .enumerate()
                .map(|(t, x)| if totals[t] > 0.0 { x / totals[t] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Weighted importance sampling (per-trajectory by default). Returns 0 when
/// every weight vanishes.
pub fn is_value(dataset: &OfflineDataset, pi: &TabularPolicy, pi_beta: &TabularPolicy, gamma: f64) -> f64 {
    is_value_with(dataset, pi, pi_beta, gamma, IsVariant::PerTrajectory)
}

pub fn is_value_with(
    dataset: &OfflineDataset,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    gamma: f64,
    variant: IsVariant,
) -> f64 {
    let weights = cumulative_ratios(dataset, pi, pi_beta);
    match variant {
        IsVariant::PerTrajectory => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (traj, w) in dataset.trajectories().iter().zip(&weights) {
                let wi = w.last().copied().unwrap_or(1.0);
                if wi == 0.0 {
                    continue;
                }
                num += wi * traj.discounted_return(gamma);
                den += wi;
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        }
        IsVariant::PerDecision => {
            let wbar = normalized_step_weights(&weights);
            let mut v = 0.0;
            for (traj, w) in dataset.trajectories().iter().zip(&wbar) {
                let mut disc = 1.0;
                for (st, x) in traj.steps.iter().zip(w) {
                    v += disc * x * st.reward;
                    disc *= gamma;
                }
            }
            v
        }
    }
}

/// Weighted doubly robust estimate with `model_q` as the control variate.
pub fn dr_value(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    gamma: f64,
) -> Result<f64> {
    let q_hat = hve::model_q(model, pi, gamma)?;
    Ok(dr_value_with_q(dataset, &q_hat, pi, pi_beta, gamma))
}

/// Weighted doubly robust estimate around an arbitrary `Q^`:
/// unrolls `V_DR(t) = V^(s_t) + w (r_t + g V_DR(t+1) - Q^(s_t, a_t))` with
/// per-step self-normalized cumulative weights. Truncated trajectories
/// bootstrap `V_DR(L) = V^(s_L)`.
pub fn dr_value_with_q(
    dataset: &OfflineDataset,
    q_hat: &QTable,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    gamma: f64,
) -> f64 {
    let n = dataset.trajectories().len();
    if n == 0 {
        return 0.0;
    }
    let wbar = normalized_step_weights(&cumulative_ratios(dataset, pi, pi_beta));
    let mut v = 0.0;
    for (traj, w) in dataset.trajectories().iter().zip(&wbar) {
        let mut prev = 1.0 / n as f64;
        let mut disc = 1.0;
        for (st, &x) in traj.steps.iter().zip(w) {
            v += disc * (x * (st.reward - q_hat.get(st.state, st.action)) + prev * q_hat.state_value(pi, st.state));
            prev = x;
            disc *= gamma;
        }
        if traj.truncated {
            if let Some(last) = traj.steps.last() {
                v += disc * prev * q_hat.state_value(pi, last.next_state);
            }
        }
    }
    v
}

pub fn absolute_error(true_v: f64, est_v: f64) -> f64 {
    (true_v - est_v).abs()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` with fewer than two points or zero spread.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson over the rank vectors.
pub fn rank_correlation(true_vs: &[f64], est_vs: &[f64]) -> Option<f64> {
    pearson(&ranks(true_vs), &ranks(est_vs))
}

/// `max_i V_i - max_{j in top-k by estimate} V_j`. Ties at the cut go to
/// the higher estimate, then the lower index.
pub fn regret_at_k(true_vs: &[f64], est_vs: &[f64], k: usize) -> f64 {
    if true_vs.is_empty() || k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..est_vs.len()).collect();
    order.sort_by(|&a, &b| est_vs[b].total_cmp(&est_vs[a]).then(a.cmp(&b)));
    let best = true_vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let picked = order
        .iter()
        .take(k)
        .map(|&j| true_vs[j])
        .fold(f64::NEG_INFINITY, f64::max);
    best - picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPolicy {
    pub label: String,
    pub policy: TabularPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub policies: Vec<LabeledPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_values: Option<Vec<f64>>,
}

impl PolicySet {
    pub fn new(policies: Vec<LabeledPolicy>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &policies {
            if !seen.insert(p.label.as_str()) {
                return Err(HveError::Config(format!("duplicate policy label {:?}", p.label)));
            }
        }
        Ok(PolicySet {
            policies,
            true_values: None,
        })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.policies.iter().map(|p| p.label.as_str()).collect()
    }

    /// Fills `true_values` from the ground-truth MDP.
    pub fn fill_true_values(&mut self, mdp: &TabularMdp) -> Result<()> {
        let values = self
            .policies
            .iter()
            .map(|p| policy_value(mdp, &p.policy))
            .collect::<Result<Vec<_>>>()?;
        self.true_values = Some(values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpeMethod {
    Ophve,
    Mb,
    Fqe,
    Is,
    Dr,
}

impl OpeMethod {
    pub const ALL: [OpeMethod; 5] = [OpeMethod::Ophve, OpeMethod::Mb, OpeMethod::Fqe, OpeMethod::Is, OpeMethod::Dr];

    pub fn as_str(self) -> &'static str {
        match self {
            OpeMethod::Ophve => "ophve",
            OpeMethod::Mb => "mb",
            OpeMethod::Fqe => "fqe",
            OpeMethod::Is => "is",
            OpeMethod::Dr => "dr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeConfig {
    pub methods: Vec<OpeMethod>,
    pub hve: HveConfig,
    pub fqe_iters: usize,
    pub fqe_tol: f64,
    pub is_variant: IsVariant,
    pub regret_k: Vec<usize>,
    pub normalize: bool,
}

impl Default for OpeConfig {
    fn default() -> Self {
        OpeConfig {
            methods: OpeMethod::ALL.to_vec(),
            hve: HveConfig::default(),
            fqe_iters: 2000,
            fqe_tol: 1e-10,
            is_variant: IsVariant::PerTrajectory,
            regret_k: vec![1, 3],
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
    /// Set when the value range collapsed and values were left raw.
    pub degenerate: bool,
}

impl Normalization {
    fn apply(&self, v: f64) -> f64 {
        if self.degenerate {
            v
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub abs_errors: Vec<f64>,
    pub mean_abs_error: f64,
    pub rank_correlation: Option<f64>,
    pub pearson: Option<f64>,
    /// `(k, regret@k)`
    pub regret: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: OpeMethod,
    pub estimates: Vec<f64>,
    /// Step length per policy; OPHVE only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<i32>>,
    pub metrics: MethodMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub labels: Vec<String>,
    pub true_values: Vec<f64>,
    pub normalization: Option<Normalization>,
    pub results: Vec<MethodResult>,
}

impl OpeReport {
    pub fn method(&self, m: OpeMethod) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == m)
    }

    /// One row per policy and method.
    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut out = String::new();
        if !header_comment.is_empty() {
            let _ = writeln!(out, "# {header_comment}");
        }
        out.push_str("policy,method,true_value,estimate,h,normalized_true,normalized_estimate,abs_error\n");
        for r in &self.results {
            for (i, label) in self.labels.iter().enumerate() {
                let (nt, ne) = match &self.normalization {
                    Some(n) => (n.apply(self.true_values[i]), n.apply(r.estimates[i])),
                    None => (self.true_values[i], r.estimates[i]),
                };
                let h = r.h.as_ref().map(|h| h[i].to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{label},{},{},{},{h},{nt},{ne},{}",
                    r.method.as_str(),
                    self.true_values[i],
                    r.estimates[i],
                    r.metrics.abs_errors[i]
                );
            }
        }
        out
    }
}

fn metrics(true_vs: &[f64], est_vs: &[f64], ks: &[usize]) -> MethodMetrics {
    let abs_errors: Vec<f64> = true_vs.iter().zip(est_vs).map(|(t, e)| absolute_error(*t, *e)).collect();
    let mean_abs_error = abs_errors.iter().sum::<f64>() / abs_errors.len().max(1) as f64;
    MethodMetrics {
        abs_errors,
        mean_abs_error,
        rank_correlation: rank_correlation(true_vs, est_vs),
        pearson: pearson(true_vs, est_vs),
        regret: ks.iter().map(|&k| (k, regret_at_k(true_vs, est_vs, k))).collect(),
    }
}

/// Evaluates every policy with every configured method and scores the
/// estimates against the oracle values. The behavior policy and model are
/// whatever the caller fitted from `dataset`.
pub fn run_ope_suite(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi_beta: &TabularPolicy,
    policy_set: &PolicySet,
    cfg: &OpeConfig,
    oracle_mdp: &TabularMdp,
) -> Result<OpeReport> {
    cfg.hve.validate()?;
    if policy_set.is_empty() {
        return Err(HveError::Config("policy set is empty".into()));
    }
    let true_values = match &policy_set.true_values {
        Some(v) => v.clone(),
        None => {
            let mut filled = policy_set.clone();
            filled.fill_true_values(oracle_mdp)?;
            filled.true_values.unwrap_or_default()
        }
    };
    let rho0 = oracle_mdp.rho0();
    let gamma = cfg.hve.gamma;
    let n_pol = policy_set.len();
    let cells = par::map_indices(cfg.methods.len() * n_pol, |idx| -> Result<(f64, Option<i32>)> {
        let method = cfg.methods[idx / n_pol];
        let pi = &policy_set.policies[idx % n_pol].policy;
        Ok(match method {
            OpeMethod::Ophve => {
                let v = ophve_value(dataset, model, pi, pi_beta, &cfg.hve, rho0)?;
                (v.value, Some(v.h))
            }
            OpeMethod::Mb => (mb_value(model, pi, gamma, rho0)?, None),
            OpeMethod::Fqe => (fqe_value(dataset, pi, gamma, rho0, cfg.fqe_iters, cfg.fqe_tol)?.value, None),
            OpeMethod::Is => (is_value_with(dataset, pi, pi_beta, gamma, cfg.is_variant), None),
            OpeMethod::Dr => (dr_value(dataset, model, pi, pi_beta, gamma)?, None),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let normalization = cfg.normalize.then(|| {
        let all = true_values.iter().chain(cells.iter().map(|c| &c.0)).copied();
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Normalization {
            lo,
            hi,
            degenerate: !(hi - lo > 1e-12) || !(hi - lo).is_finite(),
        }
    });
    let norm = |v: f64| normalization.as_ref().map_or(v, |n| n.apply(v));
    let norm_true: Vec<f64> = true_values.iter().map(|&v| norm(v)).collect();

    let results = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let chunk = &cells[m * n_pol..(m + 1) * n_pol];
            let estimates: Vec<f64> = chunk.iter().map(|c| c.0).collect();
            let h = (method == OpeMethod::Ophve).then(|| chunk.iter().map(|c| c.1.unwrap_or(-1)).collect());
            let norm_est: Vec<f64> = estimates.iter().map(|&v| norm(v)).collect();
            MethodResult {
                method,
                metrics: metrics(&norm_true, &norm_est, &cfg.regret_k),
                estimates,
                h,
            }
        })
        .collect();
    Ok(OpeReport {
        labels: policy_set.labels().into_iter().map(String::from).collect(),
        true_values,
        normalization,
        results,
    })
}
