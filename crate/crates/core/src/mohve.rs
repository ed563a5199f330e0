//! Tabular model-based offline RL with hybrid value targets: model rollouts
//! into a synthetic buffer, alternating data and model critic updates,
//! a KL-constrained softmax actor with a Lagrange multiplier, periodic step
//! length adjustment and OPHVE-based snapshot selection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{HveError, Result};
use crate::hve::{self, HStep, HveConfig, IsWeighting};
use crate::learning::{
    estimate_divergences, fit_behavior_policy, fit_model_ensemble, EnsembleConfig, LearnedModel,
};
use crate::mdp::{policy_value, QTable, Step, TabularMdp, TabularPolicy};
use crate::ope;
use crate::oracle::chi2_kl_check;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MohveConfig {
    pub epochs: usize,
    /// Model rollout length.
    pub h_rollout: usize,
    /// Share of `D_mix` state weight taken from the offline data.
    pub alpha: f64,
    /// KL budget.
    pub delta: f64,
    /// Epochs between step-length updates.
    pub n_h: usize,
    pub h_max: usize,
    /// `null` disables clipping.
    pub clip_eps: Option<f64>,
    pub use_is: bool,
    pub rollout_batch: usize,
    pub buffer_capacity: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub beta_lr: f64,
    pub beta_init: f64,
    /// Per-action floor on the cloned behavior policy.
    pub behavior_floor: f64,
    pub snapshot_interval: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub ensemble: EnsembleConfig,
    /// Keep the model-trained `Q^` in its own table and use it as the
    /// bootstrap of the hybrid targets, instead of a single shared critic.
    pub two_table: bool,
    pub seed: u64,
}

impl Default for MohveConfig {
    fn default() -> Self {
        MohveConfig {
            epochs: 1000,
            h_rollout: 10,
            alpha: 0.5,
            delta: 0.1,
            n_h: 200,
            h_max: 4,
            clip_eps: Some(0.1),
            use_is: true,
            rollout_batch: 32,
            buffer_capacity: 20_000,
            critic_lr: 0.5,
            actor_lr: 1.0,
            beta_lr: 1e-2,
            beta_init: 1.0,
            behavior_floor: 1e-3,
            snapshot_interval: 50,
            gamma: 0.9,
            r_max: 1.0,
            ensemble: EnsembleConfig::default(),
            two_table: false,
            seed: 0,
        }
    }
}

impl MohveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HveError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.n_h == 0 {
            return bad("n_h must be at least 1".into());
        }
        if !(self.delta >= 0.0) || !(self.beta_init >= 0.0) {
            return bad("delta and beta_init must be >= 0".into());
        }
        if self.h_rollout == 0 || self.snapshot_interval == 0 {
            return bad("h_rollout and snapshot_interval must be at least 1".into());
        }
        if !(self.behavior_floor > 0.0) {
            return bad("behavior_floor must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        Ok(())
    }

    pub fn weighting(&self) -> IsWeighting {
        IsWeighting {
            use_is: self.use_is,
            clip_eps: self.clip_eps,
        }
    }

    /// Step-length selection settings shared with OPHVE.
    pub fn hve(&self) -> HveConfig {
        HveConfig {
            h_step: HStep::Auto,
            h_max: self.h_max,
            clip_eps: self.clip_eps,
            gamma: self.gamma,
            r_max: self.r_max,
            use_is: self.use_is,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub label: String,
    pub policy: TabularPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_value: Option<f64>,
    pub current_h: i32,
    pub beta: f64,
    /// `E_{s ~ D_mix} KL(pi || pi_beta)`
    pub kl: f64,
    /// `E_{s ~ D_mix} E_{a ~ pi_beta}[rho^2]`
    pub expected_rho_sq: f64,
    /// `c * kl + 1`
    pub rho_sq_bound: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub critic: QTable,
    /// Separate `Q^` table of the two-table variant.
    pub model_critic: Option<QTable>,
    /// Softmax logits `[s][a]`.
    pub logits: Vec<f64>,
    pub beta: f64,
    pub model_buffer: VecDeque<Step>,
    pub current_h: i32,
    pub epoch: usize,
    pub snapshots: Vec<Snapshot>,
    pub curve: Vec<CurvePoint>,
    n_states: usize,
    n_actions: usize,
}

impl TrainState {
    pub fn new(n_states: usize, n_actions: usize, beta_init: f64) -> Self {
        TrainState {
            critic: QTable::zeros(n_states, n_actions),
            model_critic: None,
            logits: vec![0.0; n_states * n_actions],
            beta: beta_init,
            model_buffer: VecDeque::new(),
            current_h: -1,
            epoch: 0,
            snapshots: Vec::new(),
            curve: Vec::new(),
            n_states,
            n_actions,
        }
    }

    pub fn with_model_critic(mut self) -> Self {
        self.model_critic = Some(QTable::zeros(self.n_states, self.n_actions));
        self
    }

    pub fn actor(&self) -> TabularPolicy {
        TabularPolicy::from_logits(self.n_states, self.n_actions, &self.logits)
    }
}

/// Starts `rollout_batch` model rollouts from states drawn uniformly over
/// the logged steps, following the current actor through random elite
/// members, and appends them to the FIFO buffer.
pub fn rollout_model(
    state: &mut TrainState,
    model: &LearnedModel,
    dataset: &OfflineDataset,
    cfg: &MohveConfig,
    rng: &mut Rng,
) -> Result<()> {
    use rand::Rng as _;
    let total = dataset.total_steps();
    if total == 0 {
        return Err(HveError::EmptyDataset);
    }
    let starts: Vec<usize> = dataset.steps().map(|st| st.state).collect();
    let actor = state.actor();
    for _ in 0..cfg.rollout_batch {
        let mut s = starts[rng.random_range(0..total)];
        for _ in 0..cfg.h_rollout {
            let a = actor.sample(s, rng);
            let (r, s2) = model.sample_step(s, a, rng);
            if state.model_buffer.len() == cfg.buffer_capacity {
                state.model_buffer.pop_front();
            }
            if cfg.buffer_capacity > 0 {
                state.model_buffer.push_back(Step {
                    state: s,
                    action: a,
                    reward: r,
                    next_state: s2,
                });
            }
            s = s2;
        }
    }
    Ok(())
}

/// Moves every covered `Q(s, a)` toward its mean hybrid target. The
/// bootstrap is the current critic, or `Q^` in the two-table variant, where
/// uncovered entries copy `Q^`. At `H = -1` the target is the bootstrap
/// itself.
pub fn critic_update_env(
    state: &mut TrainState,
    dataset: &OfflineDataset,
    pi_beta: &TabularPolicy,
    cfg: &MohveConfig,
) -> Result<()> {
    if state.current_h < 0 {
        if let Some(m) = &state.model_critic {
            state.critic = m.clone();
        }
        return Ok(());
    }
    let actor = state.actor();
    let bootstrap = state.model_critic.as_ref().unwrap_or(&state.critic);
    let est = hve::hybrid_q(
        dataset,
        bootstrap,
        &actor,
        pi_beta,
        state.current_h,
        cfg.gamma,
        cfg.weighting(),
    )?;
    let two_table = state.model_critic.is_some();
    for (sa, &n) in est.coverage.iter().enumerate() {
        let q = &mut state.critic.values[sa];
        if n > 0 {
            *q += cfg.critic_lr * (est.q.values[sa] - *q);
        } else if two_table {
            *q = est.q.values[sa];
        }
    }
    Ok(())
}

/// Expected TD(0) step on the synthetic buffer: each buffered `(s, a)` moves
/// toward the mean of `r + g E_{a' ~ pi} Q(s', a')` over its transitions.
pub fn critic_update_model(state: &mut TrainState, cfg: &MohveConfig) {
    if state.model_buffer.is_empty() {
        return;
    }
    let actor = state.actor();
    let (ns, na) = (state.n_states, state.n_actions);
    let table = state.model_critic.as_mut().unwrap_or(&mut state.critic);
    let v: Vec<f64> = (0..ns).map(|s| table.state_value(&actor, s)).collect();
    let mut sum = vec![0.0; ns * na];
    let mut count = vec![0usize; ns * na];
    for st in &state.model_buffer {
        let sa = st.state * na + st.action;
        sum[sa] += st.reward + cfg.gamma * v[st.next_state];
        count[sa] += 1;
    }
    for sa in 0..ns * na {
        if count[sa] > 0 {
            let target = sum[sa] / count[sa] as f64;
            let q = &mut table.values[sa];
            *q += cfg.critic_lr * (target - *q);
        }
    }
}

/// `D_mix` state weights: `alpha` times the data state frequencies plus
/// `1 - alpha` times the buffer state frequencies (all on the data when the
/// buffer is empty).
pub fn mix_state_weights(dataset: &OfflineDataset, buffer: &VecDeque<Step>, alpha: f64) -> Vec<f64> {
    let data = dataset.state_frequencies();
    if buffer.is_empty() {
        return data;
    }
    let mut model = vec![0.0; data.len()];
    for st in buffer {
        model[st.state] += 1.0;
    }
    let n = buffer.len() as f64;
    data.iter().zip(&model).map(|(d, m)| alpha * d + (1.0 - alpha) * m / n).collect()
}

/// Softmax row of one state.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum()
}

/// Lagrangian actor objective
/// `sum_s w_s [ sum_a pi(a|s) Q(s, a) + beta (delta - KL(pi(.|s) || pi_beta(.|s))) ]`.
pub fn actor_objective(
    logits: &[f64],
    critic: &QTable,
    pi_beta: &TabularPolicy,
    weights: &[f64],
    beta: f64,
    delta: f64,
) -> f64 {
    let na = critic.n_actions;
    weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| {
            let p = softmax(&logits[s * na..(s + 1) * na]);
            let value: f64 = p.iter().zip(critic.row(s)).map(|(p, q)| p * q).sum();
            w * (value + beta * (delta - kl_row(&p, pi_beta.row(s))))
        })
        .sum()
}

/// Analytic gradient of [`actor_objective`] in the logits:
/// `w_s pi_b (g_b - sum_a pi_a g_a)` with `g_a = Q_a - beta (log pi_a - log pi_beta_a)`.
pub fn actor_gradient(logits: &[f64], critic: &QTable, pi_beta: &TabularPolicy, weights: &[f64], beta: f64) -> Vec<f64> {
    let na = critic.n_actions;
    let mut grad = vec![0.0; logits.len()];
    for (s, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let p = softmax(&logits[s * na..(s + 1) * na]);
        let g: Vec<f64> = (0..na)
            .map(|a| critic.get(s, a) - beta * (p[a].ln() - pi_beta.prob(s, a).ln()))
            .collect();
        let mean: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
        for a in 0..na {
            grad[s * na + a] = w * p[a] * (g[a] - mean);
        }
    }
    grad
}

/// `E_{s ~ w} KL(pi || pi_beta)`.
pub fn weighted_kl(pi: &TabularPolicy, pi_beta: &TabularPolicy, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| w * kl_row(pi.row(s), pi_beta.row(s)))
        .sum()
}

/// Logits kept within this distance of each row's maximum, so every action
/// keeps a positive probability and `log pi` stays finite.
pub const LOGIT_RANGE: f64 = 30.0;

/// Shifts each row so its maximum is 0 and clamps the rest at
/// `-LOGIT_RANGE`.
fn recenter_logits(logits: &mut [f64], n_actions: usize) {
    for row in logits.chunks_mut(n_actions) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for l in row.iter_mut() {
            *l = (*l - m).max(-LOGIT_RANGE);
        }
    }
}

/// One ascent step on the logits and one projected descent step on `beta`,
/// both measured under the same `D_mix` state weights. Returns the KL after
/// the actor step.
pub fn policy_improvement(
    state: &mut TrainState,
    dataset: &OfflineDataset,
    pi_beta: &TabularPolicy,
    cfg: &MohveConfig,
) -> f64 {
    let weights = mix_state_weights(dataset, &state.model_buffer, cfg.alpha);
    let grad = actor_gradient(&state.logits, &state.critic, pi_beta, &weights, state.beta);
    for (l, g) in state.logits.iter_mut().zip(&grad) {
        *l += cfg.actor_lr * g;
    }
    recenter_logits(&mut state.logits, state.n_actions);
    let kl = weighted_kl(&state.actor(), pi_beta, &weights);
    state.beta = (state.beta - cfg.beta_lr * (cfg.delta - kl)).max(0.0);
    kl
}

/// Re-selects the step length from the actor's divergence to the cloned
/// behavior policy and the model's held-out error.
pub fn adjust_h(
    state: &mut TrainState,
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi_beta: &TabularPolicy,
    cfg: &MohveConfig,
) {
    let div = estimate_divergences(dataset, model, &state.actor(), pi_beta, None);
    state.current_h = cfg.hve().resolve_h(&div);
}

/// Runs the training loop from an already fitted model and cloned behavior
/// policy. With `eval` set, the true value of the actor is logged.
pub fn train_with(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi_beta: &TabularPolicy,
    cfg: &MohveConfig,
    eval: Option<&TabularMdp>,
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = TrainState::new(dataset.n_states(), dataset.n_actions(), cfg.beta_init);
    if cfg.two_table {
        state = state.with_model_critic();
    }
    let mut rng = rng::stream(cfg.seed, "training");
    let log = |state: &mut TrainState, kl: f64| -> Result<()> {
        let actor = state.actor();
        let weights = mix_state_weights(dataset, &state.model_buffer, cfg.alpha);
        let chi = chi2_kl_check(&actor, pi_beta, &weights);
        let true_value = eval.map(|m| policy_value(m, &actor)).transpose()?;
        state.curve.push(CurvePoint {
            epoch: state.epoch,
            true_value,
            current_h: state.current_h,
            beta: state.beta,
            kl,
            expected_rho_sq: chi.expected_rho_sq,
            rho_sq_bound: chi.bound,
        });
        Ok(())
    };
    let snapshot = |state: &mut TrainState| {
        state.snapshots.push(Snapshot {
            epoch: state.epoch,
            label: format!("epoch-{:05}", state.epoch),
            policy: state.actor(),
        });
    };
    adjust_h(&mut state, dataset, model, pi_beta, cfg);
    let kl0 = weighted_kl(&state.actor(), pi_beta, &dataset.state_frequencies());
    log(&mut state, kl0)?;
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        rollout_model(&mut state, model, dataset, cfg, &mut rng)?;
        critic_update_env(&mut state, dataset, pi_beta, cfg)?;
        critic_update_model(&mut state, cfg);
        let kl = policy_improvement(&mut state, dataset, pi_beta, cfg);
        if epoch % cfg.n_h == 0 {
            adjust_h(&mut state, dataset, model, pi_beta, cfg);
        }
        log(&mut state, kl)?;
        if epoch % cfg.snapshot_interval == 0 {
            snapshot(&mut state);
        }
    }
    Ok(state)
}

/// Fitted pieces a training run starts from.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: LearnedModel,
    pub pi_beta: TabularPolicy,
}

/// Fits the model ensemble and the floored behavior clone, each from its own
/// seed substream.
pub fn fit_for_training(dataset: &OfflineDataset, cfg: &MohveConfig) -> Result<Fitted> {
    let model = fit_model_ensemble(dataset, &cfg.ensemble, rng::derive_seed(cfg.seed, "model", 0))?;
    let pi_beta = fit_behavior_policy(dataset, 0.0)?.policy.with_floor(cfg.behavior_floor);
    Ok(Fitted { model, pi_beta })
}

/// Full pipeline: fit the model and behavior clone, then train.
pub fn train(dataset: &OfflineDataset, cfg: &MohveConfig, eval: Option<&TabularMdp>) -> Result<(Fitted, TrainState)> {
    let fitted = fit_for_training(dataset, cfg)?;
    let state = train_with(dataset, &fitted.model, &fitted.pi_beta, cfg, eval)?;
    Ok((fitted, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSnapshot {
    pub label: String,
    pub epoch: usize,
    pub estimate: f64,
    pub h: i32,
}

/// Ranks snapshots by OPHVE value and returns the top `k`. Ties keep the
/// snapshot order.
pub fn select_policy_offline(
    snapshots: &[Snapshot],
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi_beta: &TabularPolicy,
    cfg: &HveConfig,
    rho0: &[f64],
    k: usize,
) -> Result<Vec<RankedSnapshot>> {
    let mut ranked = crate::par::map_slice(snapshots, |snap| {
        ope::ophve_value(dataset, model, &snap.policy, pi_beta, cfg, rho0).map(|v| RankedSnapshot {
            label: snap.label.clone(),
            epoch: snap.epoch,
            estimate: v.value,
            h: v.h,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    // stable sort keeps snapshot order among equal estimates
    ranked.sort_by(|a, b| b.estimate.total_cmp(&a.estimate));
    ranked.truncate(k);
    Ok(ranked)
}

/// Expected best true value among `k` snapshots drawn uniformly without
/// replacement, computed exactly from order statistics.
pub fn uniform_top_k_value(true_values: &[f64], k: usize) -> f64 {
    let n = true_values.len();
    if n == 0 || k == 0 {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n);
    let mut sorted = true_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // P(max is the i-th smallest) = C(i, k-1) / C(n, k), i zero-based
    let binom = |a: usize, b: usize| -> f64 {
        if b > a {
            return 0.0;
        }
        (0..b).fold(1.0, |acc, j| acc * (a - j) as f64 / (j + 1) as f64)
    };
    let total = binom(n, k);
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| v * binom(i, k - 1) / total)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::mdp::exact_q;
    use crate::scenarios;
    use rand::Rng as _;

    fn small_setup() -> (TabularMdp, OfflineDataset, TabularPolicy) {
        let mdp = scenarios::random_mdp(4, 3, 0.9, 31);
        let beta = scenarios::random_policy(4, 3, 31).with_floor(0.05);
        let ds = generate_dataset(&mdp, &beta, "beta", 40, 20, 32).unwrap();
        (mdp, ds, beta)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::stream(5, "fd");
        let (ns, na) = (4, 3);
        let logits: Vec<f64> = (0..ns * na).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut critic = QTable::zeros(ns, na);
        critic.values.iter_mut().for_each(|q| *q = rng.random::<f64>() * 5.0);
        let beta = scenarios::random_policy(ns, na, 9);
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let grad = actor_gradient(&logits, &critic, &beta, &weights, 0.7);
        let h = 1e-6;
        for i in 0..ns * na {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (actor_objective(&up, &critic, &beta, &weights, 0.7, 0.2)
                - actor_objective(&dn, &critic, &beta, &weights, 0.7, 0.2))
                / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn vanishing_penalty_is_plain_policy_gradient() {
        let (_, ds, beta) = small_setup();
        let mut critic = QTable::zeros(4, 3);
        critic.values = (0..12).map(|i| i as f64 * 0.3).collect();
        let logits = vec![0.1; 12];
        let w = ds.state_frequencies();
        let g = actor_gradient(&logits, &critic, &beta, &w, 0.0);
        for s in 0..4 {
            for a in 0..3 {
                let p = 1.0 / 3.0;
                let mean: f64 = critic.row(s).iter().sum::<f64>() / 3.0;
                assert!((g[s * 3 + a] - w[s] * p * (critic.get(s, a) - mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_stationary_at_behavior_with_zero_budget() {
        let (_, ds, _) = small_setup();
        let cfg = MohveConfig {
            delta: 0.0,
            actor_lr: 0.0,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 3, 0.4);
        // uniform actor against a uniform clone: KL = 0
        let uniform = TabularPolicy::uniform(4, 3);
        let kl = policy_improvement(&mut state, &ds, &uniform, &cfg);
        assert_eq!(kl, 0.0);
        assert_eq!(state.beta, 0.4);
    }

    #[test]
    fn beta_never_negative() {
        let (_, ds, beta) = small_setup();
        let cfg = MohveConfig {
            delta: 10.0,
            beta_lr: 1.0,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 3, 0.1);
        for _ in 0..5 {
            policy_improvement(&mut state, &ds, &beta, &cfg);
            assert!(state.beta >= 0.0);
        }
        assert_eq!(state.beta, 0.0);
    }

    #[test]
    fn buffer_is_fifo_bounded() {
        let (mdp, ds, _) = small_setup();
        let model = LearnedModel::from_mdp(&mdp);
        let cfg = MohveConfig {
            h_rollout: 1,
            rollout_batch: 7,
            buffer_capacity: 10,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 3, 1.0);
        let mut rng = rng::stream(0, "t");
        rollout_model(&mut state, &model, &ds, &cfg, &mut rng).unwrap();
        assert_eq!(state.model_buffer.len(), 7);
        let first_batch: Vec<Step> = state.model_buffer.iter().copied().collect();
        rollout_model(&mut state, &model, &ds, &cfg, &mut rng).unwrap();
        assert_eq!(state.model_buffer.len(), 10);
        // the oldest four were evicted
        assert_eq!(state.model_buffer[0], first_batch[4]);
    }

    #[test]
    fn buffer_matches_one_step_pushforward() {
        let (mdp, ds, _) = small_setup();
        let model = LearnedModel::from_mdp(&mdp);
        let cfg = MohveConfig {
            h_rollout: 1,
            rollout_batch: 100_000,
            buffer_capacity: 100_000,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 3, 1.0);
        let actor = state.actor();
        let mut rng = rng::stream(1, "t");
        rollout_model(&mut state, &model, &ds, &cfg, &mut rng).unwrap();
        let freq = ds.state_frequencies();
        let mut expected = vec![0.0; 4];
        for s in 0..4 {
            for a in 0..3 {
                for (s2, t) in mdp.t_row(s, a).iter().enumerate() {
                    expected[s2] += freq[s] * actor.prob(s, a) * t;
                }
            }
        }
        let mut seen = vec![0.0; 4];
        for st in &state.model_buffer {
            seen[st.next_state] += 1.0 / 100_000.0;
        }
        assert!(crate::mdp::tv_distance(&seen, &expected) < 0.05);
    }

    #[test]
    fn env_update_is_noop_at_minus_one() {
        let (_, ds, beta) = small_setup();
        let mut state = TrainState::new(4, 3, 1.0);
        state.critic.values = (0..12).map(|i| i as f64).collect();
        let before = state.critic.clone();
        critic_update_env(&mut state, &ds, &beta, &MohveConfig::default()).unwrap();
        assert_eq!(state.critic, before);
    }

    #[test]
    fn env_updates_converge_on_deterministic_chain() {
        let mdp = scenarios::deterministic_chain(4, 0.9);
        let pi = TabularPolicy::deterministic(2, &[0, 0, 0, 0]).unwrap();
        let ds = generate_dataset(&mdp, &pi, "right", 5, 12, 3).unwrap();
        let cfg = MohveConfig {
            critic_lr: 1.0,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 2, 1.0);
        state.logits = vec![30.0, -30.0, 30.0, -30.0, 30.0, -30.0, 30.0, -30.0];
        state.current_h = 2;
        for _ in 0..400 {
            critic_update_env(&mut state, &ds, &pi, &cfg).unwrap();
        }
        // only the logged action is covered; compare against the actor's own Q
        let truth = exact_q(&mdp, &state.actor()).unwrap();
        for s in 0..4 {
            assert!((state.critic.get(s, 0) - truth.get(s, 0)).abs() < 1e-6);
            assert_eq!(state.critic.get(s, 1), 0.0);
        }
    }

    #[test]
    fn model_updates_converge_with_true_buffer() {
        let mdp = scenarios::deterministic_chain(4, 0.9);
        let model = LearnedModel::from_mdp(&mdp);
        let pi = TabularPolicy::uniform(4, 2);
        let ds = generate_dataset(&mdp, &pi, "u", 50, 12, 4).unwrap();
        let cfg = MohveConfig {
            critic_lr: 1.0,
            h_rollout: 5,
            rollout_batch: 200,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 2, 1.0);
        let mut rng = rng::stream(2, "t");
        rollout_model(&mut state, &model, &ds, &cfg, &mut rng).unwrap();
        for _ in 0..400 {
            critic_update_model(&mut state, &cfg);
        }
        assert!(state.critic.max_abs_diff(&exact_q(&mdp, &pi).unwrap()) < 1e-4);

        let empty_cfg = MohveConfig::default();
        let mut empty = TrainState::new(4, 2, 1.0);
        empty.critic.values = vec![1.0; 8];
        critic_update_model(&mut empty, &empty_cfg);
        assert_eq!(empty.critic.values, vec![1.0; 8]);
    }

    #[test]
    fn two_table_variant_bootstraps_from_model_table() {
        let mdp = scenarios::deterministic_chain(4, 0.9);
        let model = LearnedModel::from_mdp(&mdp);
        let pi = TabularPolicy::deterministic(2, &[0, 0, 0, 0]).unwrap();
        let ds = generate_dataset(&mdp, &pi, "right", 5, 12, 3).unwrap();
        let cfg = MohveConfig {
            critic_lr: 1.0,
            h_rollout: 4,
            rollout_batch: 100,
            two_table: true,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 2, 1.0).with_model_critic();
        state.logits = vec![30.0, -30.0, 30.0, -30.0, 30.0, -30.0, 30.0, -30.0];
        let mut rng = rng::stream(5, "t");
        rollout_model(&mut state, &model, &ds, &cfg, &mut rng).unwrap();
        for _ in 0..400 {
            critic_update_model(&mut state, &cfg);
        }
        // H = -1 copies Q^ wholesale
        critic_update_env(&mut state, &ds, &pi, &cfg).unwrap();
        assert_eq!(Some(&state.critic), state.model_critic.as_ref());
        state.current_h = 2;
        critic_update_env(&mut state, &ds, &pi, &cfg).unwrap();
        let truth = exact_q(&mdp, &state.actor()).unwrap();
        for s in 0..4 {
            assert!((state.critic.get(s, 0) - truth.get(s, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_steps_keep_the_actor_finite() {
        let (_, ds, beta) = small_setup();
        let cfg = MohveConfig {
            actor_lr: 1e6,
            beta_lr: 1e6,
            ..MohveConfig::default()
        };
        let mut state = TrainState::new(4, 3, 1.0);
        state.critic.values = (0..12).map(|i| (i % 5) as f64 * 3.0).collect();
        for _ in 0..50 {
            let kl = policy_improvement(&mut state, &ds, &beta, &cfg);
            assert!(kl.is_finite() && state.beta.is_finite());
            assert!(state.actor().as_flat().iter().all(|p| *p > 0.0 && p.is_finite()));
        }
    }

    #[test]
    fn zero_epochs_returns_uniform_actor() {
        let (_, ds, _) = small_setup();
        let cfg = MohveConfig {
            epochs: 0,
            ..MohveConfig::default()
        };
        let (_, state) = train(&ds, &cfg, None).unwrap();
        assert_eq!(state.actor(), TabularPolicy::uniform(4, 3));
        assert!(state.snapshots.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_respects_h_max() {
        let (mdp, ds, _) = small_setup();
        let cfg = MohveConfig {
            epochs: 60,
            n_h: 10,
            snapshot_interval: 20,
            ..MohveConfig::default()
        };
        let (_, a) = train(&ds, &cfg, Some(&mdp)).unwrap();
        let (_, b) = train(&ds, &cfg, Some(&mdp)).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(serde_json::to_string(&a.curve).unwrap(), serde_json::to_string(&b.curve).unwrap());
        assert_eq!(a.snapshots.len(), 3);
        assert!(a.curve.iter().all(|c| c.current_h <= 4 && c.beta >= 0.0));
    }

    #[test]
    fn perfect_model_on_behavior_selects_minus_one() {
        let (_, ds, beta) = small_setup();
        let mut state = TrainState::new(4, 3, 1.0);
        state.logits = beta.as_flat().iter().map(|p| p.ln()).collect();
        let div = crate::learning::DivergenceEstimates::new(
            crate::learning::estimate_eps_pi(&ds, &state.actor(), &beta),
            0.0,
            crate::learning::DivergenceMode::Oracle,
        );
        assert!(div.eps_pi < 1e-12);
        assert_eq!(MohveConfig::default().hve().resolve_h(&div), -1);
    }

    #[test]
    fn selection_returns_all_and_keeps_order_on_ties() {
        let (mdp, ds, beta) = small_setup();
        let model = LearnedModel::from_mdp(&mdp);
        let snaps: Vec<Snapshot> = (0..3)
            .map(|i| Snapshot {
                epoch: i,
                label: format!("s{i}"),
                policy: beta.clone(),
            })
            .collect();
        let top = select_policy_offline(&snaps, &ds, &model, &beta, &HveConfig::default(), mdp.rho0(), 3).unwrap();
        assert_eq!(top.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2"]);
    }

    #[test]
    fn uniform_top_k_by_enumeration() {
        let v = [0.3, 1.0, 0.1, 0.7];
        // 3-subsets: {0.3,1,0.1}=1 {0.3,1,0.7}=1 {0.3,0.1,0.7}=0.7 {1,0.1,0.7}=1
        assert!((uniform_top_k_value(&v, 3) - 3.7 / 4.0).abs() < 1e-12);
        assert!((uniform_top_k_value(&v, 1) - 2.1 / 4.0).abs() < 1e-12);
        assert_eq!(uniform_top_k_value(&v, 4), 1.0);
    }
}
