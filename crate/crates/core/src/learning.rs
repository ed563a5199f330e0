//! Everything fitted from data alone: the behavior policy, the bootstrap
//! model ensemble, and the divergence estimates that feed the error bound.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{HveError, Result};
use crate::mdp::{sample_categorical, tv_distance, RewardSpec, TabularMdp, TabularPolicy};
use crate::par;
use crate::rng::{self, Rng};

/// Pseudo-count used when none is configured.
pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// One count-based model: smoothed MLE transitions and empirical mean
/// rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    /// `[s][a][s']`
    pub transition: Vec<f64>,
    /// `[s][a]`
    pub reward: Vec<f64>,
    /// Visit counts `[s][a]` in the member's training sample.
    pub counts: Vec<usize>,
}

/// Bootstrap ensemble of tabular models with an elite subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct LearnedModel {
    n_states: usize,
    n_actions: usize,
    members: Vec<TabularModel>,
    elites: Vec<usize>,
    smoothing: f64,
    /// Trajectory ids held out for elite selection and empirical `eps_m`.
    holdout: Vec<usize>,
    avg_transition: Vec<f64>,
    avg_reward: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_states: usize,
    n_actions: usize,
    smoothing: f64,
    elites: Vec<usize>,
    holdout: Vec<usize>,
    members: Vec<TabularModel>,
}

impl TryFrom<ModelFile> for LearnedModel {
    type Error = HveError;
    fn try_from(f: ModelFile) -> Result<Self> {
        LearnedModel::new(f.n_states, f.n_actions, f.members, f.elites, f.smoothing, f.holdout)
    }
}

impl From<LearnedModel> for ModelFile {
    fn from(m: LearnedModel) -> Self {
        ModelFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            smoothing: m.smoothing,
            elites: m.elites,
            holdout: m.holdout,
            members: m.members,
        }
    }
}

impl LearnedModel {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        members: Vec<TabularModel>,
        elites: Vec<usize>,
        smoothing: f64,
        holdout: Vec<usize>,
    ) -> Result<Self> {
        let sa = n_states * n_actions;
        if members.is_empty() || elites.is_empty() || elites.len() > members.len() {
            return Err(HveError::Config("model needs at least one member and one elite".into()));
        }
        for m in &members {
            if m.transition.len() != sa * n_states || m.reward.len() != sa || m.counts.len() != sa {
                return Err(HveError::Config("model member has the wrong shape".into()));
            }
            for row in m.transition.chunks(n_states) {
                crate::mdp::check_row(row).map_err(HveError::Distribution)?;
            }
        }
        if elites.iter().any(|&e| e >= members.len()) {
            return Err(HveError::Config("elite index out of range".into()));
        }
        let k = elites.len() as f64;
        let mut avg_transition = vec![0.0; sa * n_states];
        let mut avg_reward = vec![0.0; sa];
        for &e in &elites {
            for (acc, t) in avg_transition.iter_mut().zip(&members[e].transition) {
                *acc += t / k;
            }
            for (acc, r) in avg_reward.iter_mut().zip(&members[e].reward) {
                *acc += r / k;
            }
        }
        Ok(LearnedModel {
            n_states,
            n_actions,
            members,
            elites,
            smoothing,
            holdout,
            avg_transition,
            avg_reward,
        })
    }

    /// A single-member "model" equal to the true dynamics and expected
    /// rewards of `mdp`.
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let member = TabularModel {
            transition: mdp.transition().to_vec(),
            reward: mdp.expected_rewards().to_vec(),
            counts: vec![0; mdp.n_states() * mdp.n_actions()],
        };
        LearnedModel::new(mdp.n_states(), mdp.n_actions(), vec![member], vec![0], 0.0, vec![])
            .expect("a valid MDP is a valid model")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn members(&self) -> &[TabularModel] {
        &self.members
    }
    pub fn elites(&self) -> &[usize] {
        &self.elites
    }
    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }
    pub fn holdout(&self) -> &[usize] {
        &self.holdout
    }

    /// Elite-averaged transition kernel `[s][a][s']`.
    pub fn transition(&self) -> &[f64] {
        &self.avg_transition
    }

    /// Elite-averaged learned rewards `[s][a]`.
    pub fn reward(&self) -> &[f64] {
        &self.avg_reward
    }

    pub fn t_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.avg_transition[base..base + self.n_states]
    }

    /// The elite-average model as an MDP with deterministic learned rewards.
    pub fn as_mdp(&self, rho0: Vec<f64>, gamma: f64, r_max: f64) -> Result<TabularMdp> {
        let rewards = self
            .avg_reward
            .iter()
            .map(|&r| RewardSpec::Deterministic {
                value: r.clamp(0.0, r_max),
            })
            .collect();
        TabularMdp::new(
            self.n_states,
            self.n_actions,
            self.avg_transition.clone(),
            rewards,
            rho0,
            gamma,
            r_max,
        )
    }

    /// One simulated step through a uniformly chosen elite member.
    pub fn sample_step(&self, s: usize, a: usize, rng: &mut Rng) -> (f64, usize) {
        let member = &self.members[self.elites[rng.random_range(0..self.elites.len())]];
        let sa = s * self.n_actions + a;
        let row = &member.transition[sa * self.n_states..(sa + 1) * self.n_states];
        (member.reward[sa], sample_categorical(row, rng))
    }

    /// Held-out transition log-likelihood of the elite average.
    pub fn average_log_likelihood(&self, dataset: &OfflineDataset, trajectories: &[usize]) -> f64 {
        log_likelihood(&self.avg_transition, self.n_states, self.n_actions, dataset, trajectories)
    }

    pub fn member_log_likelihood(&self, member: usize, dataset: &OfflineDataset, trajectories: &[usize]) -> f64 {
        log_likelihood(&self.members[member].transition, self.n_states, self.n_actions, dataset, trajectories)
    }
}

const LOG_FLOOR: f64 = 1e-12;

fn log_likelihood(
    transition: &[f64],
    ns: usize,
    na: usize,
    dataset: &OfflineDataset,
    trajectories: &[usize],
) -> f64 {
    trajectories
        .iter()
        .flat_map(|&i| dataset.trajectories()[i].steps.iter())
        .map(|st| {
            let p = transition[(st.state * na + st.action) * ns + st.next_state];
            p.max(LOG_FLOOR).ln()
        })
        .sum()
}

/// Ensemble fitting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub n_elite: usize,
    pub smoothing: f64,
    pub holdout_frac: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 7,
            n_elite: 5,
            smoothing: DEFAULT_SMOOTHING,
            holdout_frac: 0.2,
        }
    }
}

/// Transition/reward statistics accumulated from a multiset of trajectories.
struct Counts {
    next: Vec<f64>,
    visits: Vec<usize>,
    reward_sum: Vec<f64>,
}

impl Counts {
    fn new(ns: usize, na: usize) -> Self {
        Counts {
            next: vec![0.0; ns * na * ns],
            visits: vec![0; ns * na],
            reward_sum: vec![0.0; ns * na],
        }
    }

    fn add_trajectory(&mut self, dataset: &OfflineDataset, i: usize) {
        let (ns, na) = (dataset.n_states(), dataset.n_actions());
        for st in &dataset.trajectories()[i].steps {
            let sa = st.state * na + st.action;
            self.next[sa * ns + st.next_state] += 1.0;
            self.visits[sa] += 1;
            self.reward_sum[sa] += st.reward;
        }
    }

    /// Smoothed MLE rows; rows without data or pseudo-counts are uniform.
    fn transition(&self, ns: usize, smoothing: f64) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.next.len());
        for (sa, row) in self.next.chunks(ns).enumerate() {
            let total = self.visits[sa] as f64 + smoothing * ns as f64;
            if total > 0.0 {
                t.extend(row.iter().map(|c| (c + smoothing) / total));
            } else {
                t.extend(std::iter::repeat(1.0 / ns as f64).take(ns));
            }
        }
        t
    }

    fn into_model(self, ns: usize, smoothing: f64) -> TabularModel {
        let transition = self.transition(ns, smoothing);
        let reward = self
            .reward_sum
            .iter()
            .zip(&self.visits)
            .map(|(&r, &n)| if n > 0 { r / n as f64 } else { 0.0 })
            .collect();
        TabularModel {
            transition,
            reward,
            counts: self.visits,
        }
    }
}

/// Fits `k` members on bootstrap resamples of the training trajectories and
/// keeps the `n_elite` with the highest held-out log-likelihood.
pub fn fit_model_ensemble(dataset: &OfflineDataset, cfg: &EnsembleConfig, seed: u64) -> Result<LearnedModel> {
    if cfg.k == 0 || cfg.n_elite == 0 || cfg.n_elite > cfg.k {
        return Err(HveError::Config(format!(
            "need 1 <= n_elite ({}) <= k ({})",
            cfg.n_elite, cfg.k
        )));
    }
    if !(cfg.holdout_frac > 0.0 && cfg.holdout_frac < 1.0) {
        return Err(HveError::Config(format!("holdout_frac {} outside (0, 1)", cfg.holdout_frac)));
    }
    if cfg.smoothing < 0.0 {
        return Err(HveError::Config("smoothing must be non-negative".into()));
    }
    if dataset.is_empty() {
        return Err(HveError::EmptyDataset);
    }
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let n = dataset.trajectories().len();

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(seed, "holdout");
    for i in (1..n).rev() {
        order.swap(i, split_rng.random_range(0..=i));
    }
    let (holdout, train) = if n >= 2 {
        let n_hold = ((cfg.holdout_frac * n as f64).round() as usize).clamp(1, n - 1);
        let (h, t) = order.split_at(n_hold);
        let mut h = h.to_vec();
        h.sort_unstable();
        (h, t.to_vec())
    } else {
        // a single trajectory is both the training and the validation set
        (order.clone(), order)
    };

    let members = par::map_indices(cfg.k, |m| {
        let mut rng = rng::indexed_stream(seed, "bootstrap", m as u64);
        let mut counts = Counts::new(ns, na);
        for _ in 0..train.len() {
            counts.add_trajectory(dataset, train[rng.random_range(0..train.len())]);
        }
        counts.into_model(ns, cfg.smoothing)
    });

    let scores: Vec<f64> = members
        .iter()
        .map(|m| log_likelihood(&m.transition, ns, na, dataset, &holdout))
        .collect();
    let mut ranked: Vec<usize> = (0..cfg.k).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut elites = ranked[..cfg.n_elite].to_vec();
    elites.sort_unstable();

    LearnedModel::new(ns, na, members, elites, cfg.smoothing, holdout)
}

/// Single count model on all trajectories, without bootstrap or holdout.
pub fn fit_full_model(dataset: &OfflineDataset, smoothing: f64) -> Result<LearnedModel> {
    if dataset.is_empty() {
        return Err(HveError::EmptyDataset);
    }
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let mut counts = Counts::new(ns, na);
    for i in 0..dataset.trajectories().len() {
        counts.add_trajectory(dataset, i);
    }
    LearnedModel::new(ns, na, vec![counts.into_model(ns, smoothing)], vec![0], smoothing, vec![])
}

/// Maximum-likelihood behavior policy with additive smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicyEstimate {
    pub policy: TabularPolicy,
    /// `[s][a]`
    pub counts: Vec<usize>,
    pub smoothing: f64,
}

/// `(count(s,a) + alpha) / (count(s) + alpha * n_actions)`; states never
/// visited get a uniform row.
pub fn fit_behavior_policy(dataset: &OfflineDataset, smoothing: f64) -> Result<BehaviorPolicyEstimate> {
    if smoothing < 0.0 {
        return Err(HveError::Config("smoothing must be non-negative".into()));
    }
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let counts = dataset.sa_counts();
    let mut probs = Vec::with_capacity(ns * na);
    for row in counts.chunks(na) {
        let total = row.iter().sum::<usize>() as f64 + smoothing * na as f64;
        if total > 0.0 {
            probs.extend(row.iter().map(|&c| (c as f64 + smoothing) / total));
        } else {
            probs.extend(std::iter::repeat(1.0 / na as f64).take(na));
        }
    }
    Ok(BehaviorPolicyEstimate {
        policy: TabularPolicy::from_flat(ns, na, probs)?,
        counts,
        smoothing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Uses the true transition kernel; verification only.
    Oracle,
    /// Uses data alone.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimates {
    pub eps_pi: f64,
    pub eps_m: f64,
    /// Policy divergence left after truncated importance sampling; bounded
    /// above by `eps_pi`, which is what is stored.
    pub eps_pi_clipped: f64,
    pub mode: DivergenceMode,
}

impl DivergenceEstimates {
    pub fn new(eps_pi: f64, eps_m: f64, mode: DivergenceMode) -> Self {
        DivergenceEstimates {
            eps_pi,
            eps_m,
            eps_pi_clipped: eps_pi,
            mode,
        }
    }
}

/// State-frequency-weighted TV between `pi` and the behavior policy.
pub fn estimate_eps_pi(dataset: &OfflineDataset, pi: &TabularPolicy, pi_beta: &TabularPolicy) -> f64 {
    dataset
        .state_frequencies()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| w * tv_distance(pi.row(s), pi_beta.row(s)))
        .sum()
}

/// Dataset-weighted TV between the true (oracle) or held-out empirical
/// transition rows and the model's elite-averaged rows.
pub fn estimate_eps_m(dataset: &OfflineDataset, model: &LearnedModel, truth: Option<&TabularMdp>) -> f64 {
    let (ns, na) = (dataset.n_states(), dataset.n_actions());
    let weights = dataset.sa_frequencies();
    match truth {
        Some(mdp) => (0..ns * na)
            .filter(|&sa| weights[sa] > 0.0)
            .map(|sa| weights[sa] * tv_distance(mdp.t_row(sa / na, sa % na), model.t_row(sa / na, sa % na)))
            .sum(),
        None => {
            let mut counts = Counts::new(ns, na);
            if model.holdout().is_empty() {
                (0..dataset.trajectories().len()).for_each(|i| counts.add_trajectory(dataset, i));
            } else {
                model.holdout().iter().for_each(|&i| counts.add_trajectory(dataset, i));
            }
            let reference = counts.transition(ns, model.smoothing());
            let mut num = 0.0;
            let mut den = 0.0;
            for sa in 0..ns * na {
                if weights[sa] == 0.0 || counts.visits[sa] == 0 {
                    continue;
                }
                let row = &reference[sa * ns..(sa + 1) * ns];
                num += weights[sa] * tv_distance(row, model.t_row(sa / na, sa % na));
                den += weights[sa];
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        }
    }
}

pub fn estimate_divergences(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    truth: Option<&TabularMdp>,
) -> DivergenceEstimates {
    let mode = if truth.is_some() {
        DivergenceMode::Oracle
    } else {
        DivergenceMode::Empirical
    };
    DivergenceEstimates::new(
        estimate_eps_pi(dataset, pi, pi_beta),
        estimate_eps_m(dataset, model, truth),
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::mdp::{Step, Trajectory};
    use crate::scenarios;

    fn det_chain() -> TabularMdp {
        // 3 states, 2 actions: a0 moves right (clamped), a1 stays
        let mut t = vec![0.0; 3 * 2 * 3];
        for s in 0..3 {
            t[(s * 2) * 3 + (s + 1).min(2)] = 1.0;
            t[(s * 2 + 1) * 3 + s] = 1.0;
        }
        let r = RewardSpec::Deterministic { value: 0.5 };
        TabularMdp::new(3, 2, t, vec![r; 6], vec![1.0, 0.0, 0.0], 0.9, 1.0).unwrap()
    }

    #[test]
    fn behavior_recovers_deterministic_policy() {
        let mdp = det_chain();
        let pi = TabularPolicy::deterministic(2, &[0, 1, 1]).unwrap();
        let ds = generate_dataset(&mdp, &pi, "det", 5, 6, 0).unwrap();
        let est = fit_behavior_policy(&ds, 0.0).unwrap();
        for s in 0..3 {
            if ds.state_frequencies()[s] > 0.0 {
                assert_eq!(est.policy.row(s), pi.row(s));
            }
        }
    }

    #[test]
    fn unvisited_state_is_uniform() {
        let traj = Trajectory {
            steps: vec![Step { state: 0, action: 1, reward: 0.0, next_state: 0 }],
            truncated: true,
        };
        let ds = OfflineDataset::from_trajectories(2, 3, vec![traj], "h", "x", 0).unwrap();
        for smoothing in [0.0, 0.5] {
            let est = fit_behavior_policy(&ds, smoothing).unwrap();
            assert_eq!(est.policy.row(1), &[1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn behavior_estimate_concentrates() {
        // single state, two actions, pi(a0) = 0.3; 10^4 visits
        let r = RewardSpec::Deterministic { value: 0.0 };
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![r; 2], vec![1.0], 0.9, 1.0).unwrap();
        let pi = TabularPolicy::from_rows(vec![vec![0.3, 0.7]]).unwrap();
        let ds = generate_dataset(&mdp, &pi, "b", 100, 100, 4).unwrap();
        let est = fit_behavior_policy(&ds, 0.5).unwrap();
        assert!((est.policy.prob(0, 0) - 0.3).abs() < 0.02);
    }

    #[test]
    fn single_member_matches_deterministic_truth() {
        let mdp = det_chain();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(3, 2), "u", 20, 8, 1).unwrap();
        let cfg = EnsembleConfig { k: 1, n_elite: 1, smoothing: 0.0, holdout_frac: 0.2 };
        let model = fit_model_ensemble(&ds, &cfg, 3).unwrap();
        let member = &model.members()[0];
        for sa in 0..6 {
            if member.counts[sa] > 0 {
                assert_eq!(&member.transition[sa * 3..sa * 3 + 3], mdp.t_row(sa / 2, sa % 2));
                assert_eq!(member.reward[sa], 0.5);
            }
        }
    }

    #[test]
    fn unvisited_pair_is_uniform_with_zero_reward() {
        let traj = Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 1.0, next_state: 1 },
                Step { state: 1, action: 0, reward: 1.0, next_state: 0 },
            ],
            truncated: true,
        };
        let ds = OfflineDataset::from_trajectories(2, 2, vec![traj.clone(), traj], "h", "x", 0).unwrap();
        let model = fit_full_model(&ds, 0.0).unwrap();
        assert_eq!(model.t_row(0, 1), &[0.5, 0.5]);
        assert_eq!(model.reward()[1], 0.0);
        assert_eq!(model.t_row(0, 0), &[0.0, 1.0]);
    }

    #[test]
    fn ensemble_shape_and_elites() {
        let mdp = scenarios::random_mdp(5, 2, 0.9, 7);
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(5, 2), "u", 40, 20, 2).unwrap();
        let model = fit_model_ensemble(&ds, &EnsembleConfig::default(), 9).unwrap();
        assert_eq!(model.members().len(), 7);
        assert_eq!(model.elites().len(), 5);
        assert_eq!(model.holdout().len(), 8);
        // elite average beats the worst member on held-out data
        let avg = model.average_log_likelihood(&ds, model.holdout());
        let worst = (0..7)
            .map(|m| model.member_log_likelihood(m, &ds, model.holdout()))
            .fold(f64::INFINITY, f64::min);
        assert!(avg >= worst);
        let json = serde_json::to_string(&model).unwrap();
        let back: LearnedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn ensemble_errors() {
        let empty = OfflineDataset::from_trajectories(2, 2, vec![], "e", "x", 0).unwrap();
        assert!(matches!(
            fit_model_ensemble(&empty, &EnsembleConfig::default(), 0),
            Err(HveError::EmptyDataset)
        ));
        let bad = EnsembleConfig { k: 2, n_elite: 3, ..Default::default() };
        assert!(fit_model_ensemble(&empty, &bad, 0).is_err());
    }

    #[test]
    fn eps_pi_examples() {
        let traj = Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 0.0, next_state: 1 },
                Step { state: 1, action: 0, reward: 0.0, next_state: 1 },
                Step { state: 1, action: 1, reward: 0.0, next_state: 0 },
                Step { state: 0, action: 1, reward: 0.0, next_state: 0 },
            ],
            truncated: true,
        };
        let ds = OfflineDataset::from_trajectories(2, 2, vec![traj], "h", "x", 0).unwrap();
        let beta = TabularPolicy::deterministic(2, &[0, 1]).unwrap();
        assert_eq!(estimate_eps_pi(&ds, &beta, &beta), 0.0);
        let flip = TabularPolicy::deterministic(2, &[1, 0]).unwrap();
        assert_eq!(estimate_eps_pi(&ds, &flip, &beta), 1.0);
        // state weights 0.5/0.5; TVs 0.2 and 0.6 -> 0.4
        let pi = TabularPolicy::from_rows(vec![vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap();
        assert!((estimate_eps_pi(&ds, &pi, &beta) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn eps_pi_linear_under_mixing() {
        let mdp = scenarios::random_mdp(5, 3, 0.9, 1);
        let beta = TabularPolicy::uniform(5, 3);
        let ds = generate_dataset(&mdp, &beta, "u", 30, 10, 5).unwrap();
        let pi = TabularPolicy::deterministic(3, &[0, 1, 2, 0, 1]).unwrap();
        let full = estimate_eps_pi(&ds, &pi, &beta);
        for lambda in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let mixed = pi.mix(&beta, lambda).unwrap();
            assert!(estimate_eps_pi(&ds, &mixed, &beta) <= lambda * full + 1e-12);
        }
    }

    #[test]
    fn eps_m_oracle_examples() {
        let mdp = det_chain();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(3, 2), "u", 10, 5, 0).unwrap();
        assert_eq!(estimate_eps_m(&ds, &LearnedModel::from_mdp(&mdp), Some(&mdp)), 0.0);

        // uniform model against deterministic 4-state truth: 1 - 1/4 per row
        let mut t = vec![0.0; 16];
        for s in 0..4 {
            t[s * 4 + (s + 1) % 4] = 1.0;
        }
        let r = RewardSpec::Deterministic { value: 0.0 };
        let ring = TabularMdp::new(4, 1, t, vec![r; 4], vec![1.0, 0.0, 0.0, 0.0], 0.9, 1.0).unwrap();
        let ds = generate_dataset(&ring, &TabularPolicy::uniform(4, 1), "u", 2, 8, 0).unwrap();
        let uniform = TabularModel {
            transition: vec![0.25; 16],
            reward: vec![0.0; 4],
            counts: vec![0; 4],
        };
        let model = LearnedModel::new(4, 1, vec![uniform], vec![0], 0.0, vec![]).unwrap();
        assert!((estimate_eps_m(&ds, &model, Some(&ring)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn eps_m_empirical_tracks_oracle_on_large_data() {
        let mdp = scenarios::random_mdp(5, 2, 0.9, 3);
        let beta = TabularPolicy::uniform(5, 2);
        let ds = generate_dataset(&mdp, &beta, "u", 10_000, 20, 6).unwrap();
        let model = fit_model_ensemble(&ds, &EnsembleConfig::default(), 1).unwrap();
        let oracle = estimate_eps_m(&ds, &model, Some(&mdp));
        let empirical = estimate_eps_m(&ds, &model, None);
        assert!((oracle - empirical).abs() < 0.05, "{oracle} vs {empirical}");
    }

    #[test]
    fn eps_m_shrinks_with_data() {
        let beta = TabularPolicy::uniform(5, 2);
        for seed in 0..10 {
            let mdp = scenarios::random_mdp(5, 2, 0.9, 100 + seed);
            let err = |n: usize| {
                let ds = generate_dataset(&mdp, &beta, "u", n, 20, seed).unwrap();
                let model = fit_model_ensemble(&ds, &EnsembleConfig::default(), seed).unwrap();
                estimate_eps_m(&ds, &model, Some(&mdp))
            };
            assert!(err(10_000) < err(100));
        }
    }
}
