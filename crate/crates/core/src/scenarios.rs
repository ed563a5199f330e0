//! Constructed environments and policy families used by the experiments,
//! the verification battery and the bundled CLI configs.

use rand::Rng as _;

use crate::learning::{LearnedModel, TabularModel};
use crate::mdp::{RewardSpec, TabularMdp, TabularPolicy};
use crate::rng;

fn random_simplex(n: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// Dense random MDP: Dirichlet(1) transition rows, Bernoulli rewards with
/// uniform success probabilities, Dirichlet(1) initial distribution.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    let mut rng = rng::stream(seed, "random-mdp");
    let mut t = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        t.extend(random_simplex(n_states, &mut rng));
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| RewardSpec::Bernoulli { p: rng.random() })
        .collect();
    let rho0 = random_simplex(n_states, &mut rng);
    TabularMdp::new(n_states, n_actions, t, rewards, rho0, gamma, 1.0).expect("valid random MDP")
}

/// Random policy with Dirichlet(1) rows.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = rng::stream(seed, "random-policy");
    let rows = (0..n_states).map(|_| random_simplex(n_actions, &mut rng)).collect();
    TabularPolicy::from_rows(rows).expect("simplex rows")
}

/// The 4-state, 2-action Bernoulli-reward MDP used for variance checks,
/// with a behavior policy and a distinct target policy.
pub fn variance_instance() -> (TabularMdp, TabularPolicy, TabularPolicy) {
    let mdp = random_mdp(4, 2, 0.9, 7);
    let pi_beta = TabularPolicy::from_rows(vec![
        vec![0.5, 0.5],
        vec![0.6, 0.4],
        vec![0.3, 0.7],
        vec![0.5, 0.5],
    ])
    .expect("valid rows");
    let pi = TabularPolicy::from_rows(vec![
        vec![0.8, 0.2],
        vec![0.3, 0.7],
        vec![0.45, 0.55],
        vec![0.2, 0.8],
    ])
    .expect("valid rows");
    (mdp, pi_beta, pi)
}

/// Single-member model whose transition rows are mixed toward random rows
/// with weight `strength` and whose rewards are shifted by up to
/// `reward_noise` (clamped to `[0, r_max]`).
pub fn perturbed_model(mdp: &TabularMdp, strength: f64, reward_noise: f64, seed: u64) -> LearnedModel {
    let mut rng = rng::stream(seed, "perturbed-model");
    let ns = mdp.n_states();
    let mut transition = Vec::with_capacity(mdp.transition().len());
    for row in mdp.transition().chunks(ns) {
        let noise = random_simplex(ns, &mut rng);
        transition.extend(row.iter().zip(&noise).map(|(t, n)| (1.0 - strength) * t + strength * n));
    }
    let reward = mdp
        .expected_rewards()
        .iter()
        .map(|r| (r + reward_noise * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, mdp.r_max()))
        .collect();
    let member = TabularModel {
        transition,
        reward,
        counts: vec![0; ns * mdp.n_actions()],
    };
    LearnedModel::new(ns, mdp.n_actions(), vec![member], vec![0], 0.0, vec![]).expect("valid model")
}

/// Deterministic chain: action 0 moves right (the last state loops), action
/// 1 stays put. Reward 1 in the last state, 0 elsewhere.
pub fn deterministic_chain(n_states: usize, gamma: f64) -> TabularMdp {
    let mut t = vec![0.0; n_states * 2 * n_states];
    let mut rewards = Vec::with_capacity(n_states * 2);
    for s in 0..n_states {
        t[(s * 2) * n_states + (s + 1).min(n_states - 1)] = 1.0;
        t[(s * 2 + 1) * n_states + s] = 1.0;
        let value = if s + 1 == n_states { 1.0 } else { 0.0 };
        rewards.extend([RewardSpec::Deterministic { value }; 2]);
    }
    let mut rho0 = vec![0.0; n_states];
    rho0[0] = 1.0;
    TabularMdp::new(n_states, 2, t, rewards, rho0, gamma, 1.0).expect("valid chain")
}

/// Random MDP where each `(s, a)` reaches only `branching` successor states
/// (Dirichlet(1) weights over a random subset). Rewards are Bernoulli.
pub fn sparse_random_mdp(n_states: usize, n_actions: usize, branching: usize, gamma: f64, seed: u64) -> TabularMdp {
    let mut rng = rng::stream(seed, "sparse-mdp");
    let branching = branching.clamp(1, n_states);
    let mut t = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        let mut targets: Vec<usize> = (0..n_states).collect();
        for i in 0..branching {
            let j = rng.random_range(i..n_states);
            targets.swap(i, j);
        }
        for (s2, w) in targets[..branching].iter().zip(random_simplex(branching, &mut rng)) {
            t[sa * n_states + s2] = w;
        }
    }
    let rewards = (0..n_states * n_actions)
        .map(|_| RewardSpec::Bernoulli { p: rng.random() })
        .collect();
    let rho0 = random_simplex(n_states, &mut rng);
    TabularMdp::new(n_states, n_actions, t, rewards, rho0, gamma, 1.0).expect("valid sparse MDP")
}

/// Fixed pieces of the poor-model instance: a low-discount MDP, a behavior
/// policy and a target policy at moderate divergence from it.
pub struct PoorModelInstance {
    pub mdp: TabularMdp,
    pub pi_beta: TabularPolicy,
    pub pi: TabularPolicy,
    /// Strength of the transition perturbation applied to the model.
    pub model_noise: f64,
    /// Half-width of the reward perturbation applied to the model.
    pub reward_noise: f64,
}

pub fn poor_model_instance() -> PoorModelInstance {
    let mdp = random_mdp(6, 2, 0.6, 61);
    let pi_beta = random_policy(6, 2, 62).with_floor(0.2);
    let target = random_policy(6, 2, 63).with_floor(0.2);
    let pi = pi_beta.mix(&target, 0.5).expect("same shape");
    PoorModelInstance {
        mdp,
        pi_beta,
        pi,
        model_noise: 0.6,
        reward_noise: 0.4,
    }
}

/// Ten epsilon-greedy policies around the optimal policy, from greedy
/// (`eps = 0`) to nearly uniform (`eps = 0.9`).
pub fn epsilon_ladder(mdp: &TabularMdp, n: usize) -> Vec<(String, TabularPolicy)> {
    let (opt, _) = crate::mdp::optimal_policy(mdp).expect("solvable MDP");
    let greedy = opt.greedy_actions();
    (0..n)
        .map(|i| {
            let eps = i as f64 / n as f64;
            let p = TabularPolicy::epsilon_greedy(mdp.n_actions(), &greedy, eps).expect("eps in [0, 1]");
            (format!("eps-{eps:.2}"), p)
        })
        .collect()
}

/// Medium-quality behavior: the optimal action with probability
/// `1 - noise`, otherwise a fixed suboptimal action picked per state.
pub fn medium_behavior(mdp: &TabularMdp, noise: f64, seed: u64) -> TabularPolicy {
    let (opt, _) = crate::mdp::optimal_policy(mdp).expect("solvable MDP");
    let greedy = opt.greedy_actions();
    let na = mdp.n_actions();
    let mut rng = rng::stream(seed, "medium-behavior");
    let other: Vec<usize> = greedy
        .iter()
        .map(|&g| (g + 1 + rng.random_range(0..na - 1)) % na)
        .collect();
    let good = TabularPolicy::deterministic(na, &greedy).expect("valid actions");
    let bad = TabularPolicy::deterministic(na, &other).expect("valid actions");
    good.mix(&bad, 1.0 - noise).expect("same shape")
}

/// The 8-state evaluation environment.
pub fn ope_mdp() -> TabularMdp {
    sparse_random_mdp(8, 3, 3, 0.9, 81)
}

/// Grid of `width x height` cells with four moves (up, right, down, left).
/// A move slips to a perpendicular direction with probability `slip`
/// (split evenly). The goal in the far corner is absorbing and pays 1 per
/// step; trap cells are absorbing and pay nothing. Episodes start in the
/// opposite corner.
pub fn gridworld(width: usize, height: usize, slip: f64, traps: &[(usize, usize)], gamma: f64) -> TabularMdp {
    let ns = width * height;
    let idx = |x: usize, y: usize| y * width + x;
    let goal = idx(width - 1, height - 1);
    let is_trap = |s: usize| traps.iter().any(|&(x, y)| idx(x, y) == s);
    let moves: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, m: usize| -> usize {
        let (x, y) = ((s % width) as isize, (s / width) as isize);
        let (dx, dy) = moves[m];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
            s
        } else {
            idx(nx as usize, ny as usize)
        }
    };
    let mut t = vec![0.0; ns * 4 * ns];
    let mut rewards = Vec::with_capacity(ns * 4);
    for s in 0..ns {
        for a in 0..4 {
            let row = &mut t[(s * 4 + a) * ns..(s * 4 + a + 1) * ns];
            if s == goal || is_trap(s) {
                row[s] = 1.0;
            } else {
                row[target(s, a)] += 1.0 - slip;
                row[target(s, (a + 1) % 4)] += slip / 2.0;
                row[target(s, (a + 3) % 4)] += slip / 2.0;
            }
            let value = if s == goal { 1.0 } else { 0.0 };
            rewards.push(RewardSpec::Deterministic { value });
        }
    }
    let mut rho0 = vec![0.0; ns];
    rho0[0] = 1.0;
    TabularMdp::new(ns, 4, t, rewards, rho0, gamma, 1.0).expect("valid gridworld")
}

/// The offline RL gridworld: 5x5, 10% slip, two traps.
pub fn rl_gridworld() -> TabularMdp {
    gridworld(5, 5, 0.1, &[(2, 1), (1, 3)], 0.9)
}
