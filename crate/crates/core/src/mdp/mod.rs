//! Ground-truth finite MDPs: representation, simulation and exact
//! evaluation.

mod policy;
mod reward;
mod solve;

pub use policy::{sample_categorical, TabularPolicy};
pub use reward::RewardSpec;
pub use solve::{
    evaluate_q, exact_q, kl_divergence, optimal_policy, policy_value, tv_distance, visitation,
    QTable,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_index, HveError, Result};
use crate::rng::Rng;

pub(crate) use policy::{argmax, check_row};

pub const MDP_FORMAT_VERSION: u32 = 1;

/// Finite discounted MDP with stochastic rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `[s][a][s']`, row-major.
    transition: Vec<f64>,
    /// `[s][a]`
    reward: Vec<RewardSpec>,
    rho0: Vec<f64>,
    gamma: f64,
    r_max: f64,
    horizon_cap: usize,
    reward_mean: Vec<f64>,
    reward_var: Vec<f64>,
}

/// One environment transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// True when the rollout was cut by its horizon rather than ending in an
    /// absorbing zero-reward state.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_sum(self.steps.iter().map(|s| s.reward), gamma)
    }

    /// Checks that consecutive steps chain.
    pub fn is_chained(&self) -> bool {
        self.steps
            .windows(2)
            .all(|w| w[0].next_state == w[1].state)
    }
}

pub fn discounted_sum<I: IntoIterator<Item = f64>>(rewards: I, gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        g += disc * r;
        disc *= gamma;
    }
    g
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<RewardSpec>,
        rho0: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let horizon_cap = default_horizon_cap(gamma, r_max);
        Self::with_horizon_cap(n_states, n_actions, transition, reward, rho0, gamma, r_max, horizon_cap)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_horizon_cap(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<RewardSpec>,
        rho0: Vec<f64>,
        gamma: f64,
        r_max: f64,
        horizon_cap: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(HveError::Config("MDP needs at least one state and action".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(HveError::Config(format!("gamma {gamma} outside (0, 1)")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(HveError::Config(format!("r_max {r_max} must be positive")));
        }
        if horizon_cap == 0 {
            return Err(HveError::Config("horizon_cap must be positive".into()));
        }
        let sa = n_states * n_actions;
        if transition.len() != sa * n_states || reward.len() != sa || rho0.len() != n_states {
            return Err(HveError::Config("MDP tensor shapes disagree with n_states/n_actions".into()));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_row(row).map_err(|e| {
                HveError::Distribution(format!("transition[{}][{}]: {e}", i / n_actions, i % n_actions))
            })?;
        }
        check_row(&rho0).map_err(|e| HveError::Distribution(format!("rho0: {e}")))?;
        for r in &reward {
            r.validate(r_max)?;
        }
        let reward_mean = reward.iter().map(|r| r.mean(r_max)).collect();
        let reward_var = reward.iter().map(|r| r.variance(r_max)).collect();
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            rho0,
            gamma,
            r_max,
            horizon_cap,
            reward_mean,
            reward_var,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }
    pub fn horizon_cap(&self) -> usize {
        self.horizon_cap
    }
    pub fn transition(&self) -> &[f64] {
        &self.transition
    }
    pub fn reward_specs(&self) -> &[RewardSpec] {
        &self.reward
    }
    pub fn expected_rewards(&self) -> &[f64] {
        &self.reward_mean
    }

    #[inline]
    pub fn t_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    #[inline]
    pub fn reward_mean(&self, s: usize, a: usize) -> f64 {
        self.reward_mean[s * self.n_actions + a]
    }

    #[inline]
    pub fn reward_variance(&self, s: usize, a: usize) -> f64 {
        self.reward_var[s * self.n_actions + a]
    }

    pub fn reward_spec(&self, s: usize, a: usize) -> RewardSpec {
        self.reward[s * self.n_actions + a]
    }

    /// Same dynamics and rewards with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.rho0.clone(),
            gamma,
            self.r_max,
        )
    }

    pub fn with_rho0(&self, rho0: Vec<f64>) -> Result<Self> {
        Self::with_horizon_cap(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            rho0,
            self.gamma,
            self.r_max,
            self.horizon_cap,
        )
    }

    /// Absorbing: every action self-loops with deterministic zero reward.
    pub fn is_terminal(&self, s: usize) -> bool {
        (0..self.n_actions).all(|a| {
            self.t_row(s, a)[s] == 1.0
                && matches!(self.reward_spec(s, a), RewardSpec::Deterministic { value } if value == 0.0)
        })
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.rho0, rng)
    }

    /// Content hash of the canonical JSON encoding; used for dataset
    /// provenance.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(&MdpBody::from(self)).expect("MDP serializes");
        hex::encode(Sha256::digest(&body))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MdpFile {
            body: MdpBody::from(self),
            content_hash: Some(self.content_hash()),
        })
        .expect("MDP serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text).map_err(|e| HveError::json("MDP file", e))?;
        let mdp = file.body.into_mdp()?;
        if let Some(h) = file.content_hash {
            let actual = mdp.content_hash();
            if h != actual {
                return Err(HveError::Provenance {
                    expected: h,
                    found: actual,
                });
            }
        }
        Ok(mdp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| HveError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                HveError::MissingArtifact(path.as_ref().display().to_string())
            }
            _ => HveError::io(path.as_ref(), e),
        })?;
        Self::from_json(&text)
    }
}

/// Number of steps after which the discounted tail is below `1e-6`.
pub fn default_horizon_cap(gamma: f64, r_max: f64) -> usize {
    // tail after h steps <= gamma^h r_max / (1 - gamma)
    let target = 1e-6 * (1.0 - gamma) / r_max;
    ((target.ln() / gamma.ln()).ceil().max(1.0)) as usize
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpBody {
    format_version: u32,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    horizon_cap: usize,
    rho0: Vec<f64>,
    transition: Tensor,
    /// Row-major `[s][a]`.
    reward: Vec<RewardSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    #[serde(flatten)]
    body: MdpBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_hash: Option<String>,
}

impl From<&TabularMdp> for MdpBody {
    fn from(m: &TabularMdp) -> Self {
        MdpBody {
            format_version: MDP_FORMAT_VERSION,
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            r_max: m.r_max,
            horizon_cap: m.horizon_cap,
            rho0: m.rho0.clone(),
            transition: Tensor {
                shape: vec![m.n_states, m.n_actions, m.n_states],
                data: m.transition.clone(),
            },
            reward: m.reward.clone(),
        }
    }
}

impl MdpBody {
    fn into_mdp(self) -> Result<TabularMdp> {
        if self.format_version != MDP_FORMAT_VERSION {
            return Err(HveError::Config(format!(
                "unsupported MDP format version {}",
                self.format_version
            )));
        }
        if self.transition.shape != [self.n_states, self.n_actions, self.n_states] {
            return Err(HveError::Config(format!(
                "transition shape {:?} does not match [{}, {}, {}]",
                self.transition.shape, self.n_states, self.n_actions, self.n_states
            )));
        }
        TabularMdp::with_horizon_cap(
            self.n_states,
            self.n_actions,
            self.transition.data,
            self.reward,
            self.rho0,
            self.gamma,
            self.r_max,
            self.horizon_cap,
        )
    }
}

/// Samples one environment transition.
pub fn step(mdp: &TabularMdp, s: usize, a: usize, rng: &mut Rng) -> Result<(f64, usize)> {
    check_index("state", s, mdp.n_states)?;
    check_index("action", a, mdp.n_actions)?;
    let next = sample_categorical(mdp.t_row(s, a), rng);
    let reward = mdp.reward_spec(s, a).sample(mdp.r_max, rng);
    Ok((reward, next))
}

/// Rolls out `policy` for `horizon` steps. When `start` is given the first
/// state-action pair is forced; otherwise the start state is drawn from
/// `rho0`.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    start: Option<(usize, usize)>,
    horizon: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(HveError::Config("rollout horizon must be at least 1".into()));
    }
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(HveError::Config("policy shape does not match MDP".into()));
    }
    let (mut s, mut forced) = match start {
        Some((s, a)) => {
            check_index("state", s, mdp.n_states)?;
            check_index("action", a, mdp.n_actions)?;
            (s, Some(a))
        }
        None => (mdp.sample_initial(rng), None),
    };
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = forced.take().unwrap_or_else(|| policy.sample(s, rng));
        let (r, next) = step(mdp, s, a, rng)?;
        steps.push(Step {
            state: s,
            action: a,
            reward: r,
            next_state: next,
        });
        s = next;
    }
    Ok(Trajectory {
        truncated: !mdp.is_terminal(s),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn self_loop(reward: RewardSpec, r_max: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], 0.9, r_max).unwrap()
    }

    #[test]
    fn self_loop_step() {
        let mdp = self_loop(RewardSpec::Deterministic { value: 1.0 }, 1.0);
        let mut rng = stream(0, "t");
        assert_eq!(step(&mdp, 0, 0, &mut rng).unwrap(), (1.0, 0));
        assert!(step(&mdp, 1, 0, &mut rng).is_err());
        assert!(step(&mdp, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_one_scaled() {
        let mdp = self_loop(RewardSpec::Bernoulli { p: 1.0 }, 2.0);
        let mut rng = stream(0, "t");
        for _ in 0..50 {
            assert_eq!(step(&mdp, 0, 0, &mut rng).unwrap().0, 2.0);
        }
    }

    #[test]
    fn empirical_next_state_frequency() {
        let zero = RewardSpec::Deterministic { value: 0.0 };
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.3, 0.7, 0.5, 0.5],
            vec![zero, zero],
            vec![1.0, 0.0],
            0.9,
            1.0,
        )
        .unwrap();
        let mut rng = stream(1, "t");
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| step(&mdp, 0, 0, &mut rng).unwrap().1 == 1)
            .count();
        let f = ones as f64 / n as f64;
        assert!((f - 0.7).abs() < 0.01, "{f}");
    }

    #[test]
    fn deterministic_chain_rollout() {
        let zero = RewardSpec::Deterministic { value: 0.0 };
        let t = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mdp = TabularMdp::new(3, 1, t, vec![zero; 3], vec![1.0, 0.0, 0.0], 0.9, 1.0).unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let traj = rollout(&mdp, &pi, None, 3, &mut stream(0, "t")).unwrap();
        let states: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2]);
        assert!(traj.is_chained());
        assert!(!traj.truncated, "state 2 is absorbing with zero reward");
    }

    #[test]
    fn forced_start_pair() {
        let zero = RewardSpec::Deterministic { value: 0.0 };
        let mdp = TabularMdp::new(2, 2, vec![0.5; 8], vec![zero; 4], vec![1.0, 0.0], 0.9, 1.0).unwrap();
        let pi = TabularPolicy::deterministic(2, &[0, 0]).unwrap();
        for seed in 0..20 {
            let traj = rollout(&mdp, &pi, Some((1, 1)), 4, &mut stream(seed, "t")).unwrap();
            assert_eq!((traj.steps[0].state, traj.steps[0].action), (1, 1));
            assert!(traj.steps[1..].iter().all(|s| s.action == 0));
        }
    }

    #[test]
    fn self_loop_discounted_return_mc() {
        let mdp = self_loop(RewardSpec::Deterministic { value: 1.0 }, 1.0);
        let pi = TabularPolicy::uniform(1, 1);
        let mut rng = stream(2, "t");
        let n = 2_000;
        let mean = (0..n)
            .map(|_| rollout(&mdp, &pi, None, 200, &mut rng).unwrap().discounted_return(0.9))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 10.0).abs() < 0.05);
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let zero = RewardSpec::Deterministic { value: 0.0 };
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![zero], vec![1.0], 0.9, 1.0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![zero], vec![0.5], 0.9, 1.0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![zero], vec![1.0], 1.0, 1.0).is_err());
        let big = RewardSpec::Deterministic { value: 3.0 };
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![big], vec![1.0], 0.9, 1.0).is_err());
    }

    #[test]
    fn horizon_cap_tail_below_threshold() {
        let h = default_horizon_cap(0.9, 1.0);
        assert!(0.9f64.powi(h as i32) / 0.1 < 1e-6);
        assert!(0.9f64.powi(h as i32 - 1) / 0.1 >= 1e-6);
    }

    #[test]
    fn json_round_trip_and_hash_check() {
        let mdp = self_loop(RewardSpec::TruncatedGaussian { mean: 0.5, std: 0.2 }, 1.0);
        let text = mdp.to_json();
        assert_eq!(TabularMdp::from_json(&text).unwrap(), mdp);
        let tampered = text.replace("\"gamma\": 0.9", "\"gamma\": 0.8");
        assert!(matches!(
            TabularMdp::from_json(&tampered),
            Err(HveError::Provenance { .. })
        ));
    }
}
