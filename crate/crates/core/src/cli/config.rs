//! Subcommand configuration files. Every struct rejects unknown keys and
//! falls back to a working default for anything left out.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{HveError, Result};
use crate::hve::HveConfig;
use crate::learning::{DivergenceMode, EnsembleConfig};
use crate::mdp::{optimal_policy, TabularMdp, TabularPolicy};
use crate::mohve::MohveConfig;
use crate::ope::OpeConfig;
use crate::scenarios;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Random {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
    },
    SparseRandom {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        gamma: f64,
        seed: u64,
    },
    Gridworld {
        width: usize,
        height: usize,
        slip: f64,
        #[serde(default)]
        traps: Vec<(usize, usize)>,
        gamma: f64,
    },
    /// Sparse 8-state benchmark used for policy evaluation.
    OpeBenchmark,
    /// 5x5 slippery gridworld with two traps.
    RlGridworld,
    /// Instance whose model is deliberately poor.
    PoorModel,
    File {
        path: PathBuf,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::OpeBenchmark
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        Ok(match self {
            EnvSpec::Random {
                n_states,
                n_actions,
                gamma,
                seed,
            } => {
                check_gamma(*gamma)?;
                check_size(*n_states, *n_actions)?;
                scenarios::random_mdp(*n_states, *n_actions, *gamma, *seed)
            }
            EnvSpec::SparseRandom {
                n_states,
                n_actions,
                branching,
                gamma,
                seed,
            } => {
                check_gamma(*gamma)?;
                check_size(*n_states, *n_actions)?;
                if *branching == 0 || branching > n_states {
                    return Err(HveError::Config(format!("branching {branching} outside 1..={n_states}")));
                }
                scenarios::sparse_random_mdp(*n_states, *n_actions, *branching, *gamma, *seed)
            }
            EnvSpec::Gridworld {
                width,
                height,
                slip,
                traps,
                gamma,
            } => {
                check_gamma(*gamma)?;
                if *width == 0 || *height == 0 || width * height < 2 {
                    return Err(HveError::Config("gridworld needs at least two cells".into()));
                }
                if !(0.0..=1.0).contains(slip) {
                    return Err(HveError::Config(format!("slip {slip} outside [0, 1]")));
                }
                if let Some(t) = traps.iter().find(|(x, y)| x >= width || y >= height) {
                    return Err(HveError::Config(format!("trap {t:?} outside the grid")));
                }
                scenarios::gridworld(*width, *height, *slip, traps, *gamma)
            }
            EnvSpec::OpeBenchmark => scenarios::ope_mdp(),
            EnvSpec::RlGridworld => scenarios::rl_gridworld(),
            EnvSpec::PoorModel => scenarios::poor_model_instance().mdp,
            EnvSpec::File { path } => TabularMdp::load(path)?,
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(HveError::Config(format!("gamma {gamma} outside (0, 1)")))
    }
}

fn check_size(ns: usize, na: usize) -> Result<()> {
    if ns == 0 || na == 0 {
        return Err(HveError::Config("state and action counts must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorSpec {
    Uniform,
    Random {
        seed: u64,
        #[serde(default)]
        floor: f64,
    },
    /// Optimal policy mixed with a fixed suboptimal one.
    Medium {
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    EpsilonOptimal {
        eps: f64,
    },
    /// Behavior policy of the poor-model instance.
    PoorModel,
    File {
        path: PathBuf,
    },
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        BehaviorSpec::Medium { noise: 0.2, seed: 82 }
    }
}

impl BehaviorSpec {
    pub fn build(&self, mdp: &TabularMdp) -> Result<TabularPolicy> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let policy = match self {
            BehaviorSpec::Uniform => TabularPolicy::uniform(ns, na),
            BehaviorSpec::Random { seed, floor } => {
                check_unit("floor", *floor)?;
                scenarios::random_policy(ns, na, *seed).with_floor(*floor)
            }
            BehaviorSpec::Medium { noise, seed } => {
                check_unit("noise", *noise)?;
                scenarios::medium_behavior(mdp, *noise, *seed)
            }
            BehaviorSpec::EpsilonOptimal { eps } => {
                check_unit("eps", *eps)?;
                let (opt, _) = optimal_policy(mdp)?;
                TabularPolicy::epsilon_greedy(na, &opt.greedy_actions(), *eps)?
            }
            BehaviorSpec::PoorModel => scenarios::poor_model_instance().pi_beta,
            BehaviorSpec::File { path } => super::read_policy(path)?,
        };
        if policy.n_states() != ns || policy.n_actions() != na {
            return Err(HveError::Config(format!(
                "behavior policy is {}x{}, environment is {ns}x{na}",
                policy.n_states(),
                policy.n_actions()
            )));
        }
        Ok(policy)
    }

    pub fn id(&self) -> String {
        match self {
            BehaviorSpec::Uniform => "uniform".into(),
            BehaviorSpec::Random { seed, .. } => format!("random-{seed}"),
            BehaviorSpec::Medium { noise, .. } => format!("medium-{noise}"),
            BehaviorSpec::EpsilonOptimal { eps } => format!("eps-optimal-{eps}"),
            BehaviorSpec::PoorModel => "poor-model".into(),
            BehaviorSpec::File { path } => format!("file-{}", path.display()),
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(HveError::Config(format!("{name} {v} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub env: EnvSpec,
    pub behavior: BehaviorSpec,
    pub n_trajectories: usize,
    pub horizon: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            env: EnvSpec::default(),
            behavior: BehaviorSpec::default(),
            n_trajectories: 20,
            horizon: 40,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 || self.horizon == 0 {
            return Err(HveError::Config("n_trajectories and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Where a subcommand gets its dataset (and the environment it came from).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory of an earlier run that holds `mdp.json` and `dataset.jsonl`.
    Run(PathBuf),
    Generate(GenConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate(GenConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Directory of a `fit` run.
    Run(PathBuf),
    Fit(EnsembleConfig),
    /// True dynamics with noise mixed in; needs the environment.
    PerturbedTruth { strength: f64, reward_noise: f64 },
    Truth,
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Fit(EnsembleConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorEstimate {
    pub smoothing: f64,
    /// Per-action probability floor applied after fitting.
    pub floor: f64,
}

impl Default for BehaviorEstimate {
    fn default() -> Self {
        BehaviorEstimate {
            smoothing: 0.0,
            floor: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub data: DataSource,
    pub ensemble: EnsembleConfig,
    pub behavior: BehaviorEstimate,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            data: DataSource::default(),
            ensemble: EnsembleConfig::default(),
            behavior: BehaviorEstimate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    /// `n` policies, `eps = i / n`-greedy around the optimal policy.
    EpsilonLadder { n: usize },
    Files { paths: Vec<PathBuf> },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::EpsilonLadder { n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeCliConfig {
    pub data: DataSource,
    pub model: ModelSource,
    pub behavior: BehaviorEstimate,
    pub policies: PolicySpec,
    pub ope: OpeConfig,
}

impl Default for OpeCliConfig {
    fn default() -> Self {
        OpeCliConfig {
            data: DataSource::default(),
            model: ModelSource::default(),
            behavior: BehaviorEstimate::default(),
            policies: PolicySpec::default(),
            ope: OpeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    EpsilonOptimal { eps: f64 },
    /// Target policy of the poor-model instance.
    PoorModel,
    File { path: PathBuf },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::PoorModel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub data: DataSource,
    pub model: ModelSource,
    pub target: TargetSpec,
    /// Behavior policy used for importance ratios; `null` estimates it
    /// from the data.
    pub behavior: Option<BehaviorSpec>,
    pub behavior_estimate: BehaviorEstimate,
    pub divergences: DivergenceMode,
    pub h_max: usize,
    pub clip_eps: Option<f64>,
    pub use_is: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let inst = scenarios::poor_model_instance();
        SweepConfig {
            data: DataSource::Generate(GenConfig {
                env: EnvSpec::PoorModel,
                behavior: BehaviorSpec::PoorModel,
                n_trajectories: 100,
                horizon: 40,
            }),
            model: ModelSource::PerturbedTruth {
                strength: inst.model_noise,
                reward_noise: inst.reward_noise,
            },
            target: TargetSpec::PoorModel,
            behavior: Some(BehaviorSpec::PoorModel),
            behavior_estimate: BehaviorEstimate::default(),
            divergences: DivergenceMode::Oracle,
            h_max: 20,
            clip_eps: Some(0.1),
            use_is: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub data: DataSource,
    /// `seed` is replaced by the global `--seed`.
    pub mohve: MohveConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        let grid = crate::verify::GridSetup::default();
        RlConfig {
            data: DataSource::Generate(GenConfig {
                env: EnvSpec::RlGridworld,
                behavior: BehaviorSpec::Medium {
                    noise: grid.behavior_noise,
                    seed: 91,
                },
                n_trajectories: grid.n_trajectories,
                horizon: grid.horizon,
            }),
            mohve: grid.mohve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    /// Directory of an `rl` run.
    pub run: PathBuf,
    pub k: usize,
    /// Defaults to the step-length settings the run trained with.
    pub hve: Option<HveConfig>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            run: PathBuf::from("runs/rl"),
            k: 3,
            hve: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Criterion ids; empty means all.
    pub criteria: Vec<u32>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { criteria: Vec::new() }
    }
}
