//! The `hve` command line: run directories keyed by a config hash, JSON
//! outputs wrapped with provenance, and a manifest per run.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{generate_dataset, OfflineDataset};
use crate::error::{HveError, Result};
use crate::hve;
use crate::learning::{estimate_divergences, fit_behavior_policy, fit_model_ensemble, DivergenceMode, LearnedModel};
use crate::mdp::{optimal_policy, policy_value, TabularMdp, TabularPolicy};
use crate::mohve::{self, Snapshot};
use crate::ope::{self, LabeledPolicy, PolicySet};
use crate::oracle;
use crate::par;
use crate::rng::derive_seed;
use crate::scenarios;
use crate::verify;

use config::*;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "hve", version, about = "Hybrid value estimation for offline RL on tabular MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Recompute even when the run directory already has a manifest.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample an offline dataset from an environment.
    Gen,
    /// Fit the model ensemble and behavior clone.
    Fit,
    /// Evaluate a set of policies with OPHVE and the baselines.
    Ope,
    /// Train a policy offline with MOHVE.
    Rl,
    /// Bound terms and true error for every step length.
    SweepH,
    /// Rank the snapshots of an `rl` run offline.
    Select,
    /// Run the verification battery.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Fit => "fit",
            Command::Ope => "ope",
            Command::Rl => "rl",
            Command::SweepH => "sweep-h",
            Command::Select => "select",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    fn comment(&self) -> String {
        format!(
            "# subcommand={} config_hash={} seed={} version={}",
            self.subcommand, self.config_hash, self.seed, self.version
        )
    }

    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("subcommand".to_string(), self.subcommand.clone()),
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("version".to_string(), self.version.clone()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Completed,
    CacheHit,
    /// Verification ran but at least one criterion failed.
    Failed,
}

#[derive(Debug, Clone)]
pub struct Executed {
    pub dir: PathBuf,
    pub status: Status,
}

pub fn exit_code(err: &HveError) -> i32 {
    match err {
        HveError::Config(_) | HveError::Json { .. } | HveError::Index { .. } | HveError::Distribution(_) => 2,
        HveError::MissingArtifact(_) => 3,
        HveError::Provenance { .. } => 4,
        _ => 1,
    }
}

pub const VERIFY_FAILED: i32 = 5;

/// Parses `args`, runs the command, reports on stderr and returns the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(Executed { dir, status }) => match status {
            Status::Completed => {
                println!("{}", dir.display());
                0
            }
            Status::CacheHit => {
                eprintln!("cache hit: {} (use --force to recompute)", dir.display());
                println!("{}", dir.display());
                0
            }
            Status::Failed => {
                eprintln!("verification failed; see {}", dir.join("verify.json").display());
                VERIFY_FAILED
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Executed> {
    par::with_jobs(cli.jobs, || match cli.command {
        Command::Gen => dispatch::<GenConfig>(cli, run_gen),
        Command::Fit => dispatch::<FitConfig>(cli, run_fit),
        Command::Ope => dispatch::<OpeCliConfig>(cli, run_ope),
        Command::Rl => dispatch::<RlConfig>(cli, run_rl),
        Command::SweepH => dispatch::<SweepConfig>(cli, run_sweep),
        Command::Select => dispatch::<SelectConfig>(cli, run_select),
        Command::Verify => dispatch::<VerifyConfig>(cli, run_verify),
    })
}

fn load_config<C: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text).map_err(|e| HveError::json(format!("config {}", p.display()), e))
        }
    }
}

fn dispatch<C>(cli: &Cli, body: fn(&mut Run, &C) -> Result<bool>) -> Result<Executed>
where
    C: for<'de> Deserialize<'de> + Serialize + Default,
{
    let sub = cli.command.name();
    let cfg: C = load_config(cli.config.as_deref())?;
    let canonical = serde_json::to_value(&cfg).map_err(|e| HveError::json("config", e))?;
    let digest = Sha256::digest(format!("{sub}\n{canonical}").as_bytes());
    let config_hash = hex::encode(digest);
    let dir = cli.out.join(format!("{sub}-{}-s{}", &config_hash[..12], cli.seed));
    if dir.join(MANIFEST).is_file() && !cli.force {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| HveError::io(&path, e))?;
        let manifest: Value = serde_json::from_slice(&bytes).map_err(|e| HveError::json("manifest", e))?;
        let status = if manifest["passed"] == Value::Bool(false) {
            Status::Failed
        } else {
            Status::CacheHit
        };
        return Ok(Executed { dir, status });
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| HveError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| HveError::io(&dir, e))?;
    let mut run = Run {
        dir: dir.clone(),
        seed: cli.seed,
        provenance: Provenance {
            subcommand: sub.to_string(),
            config_hash,
            seed: cli.seed,
            version: VERSION.to_string(),
        },
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let passed = body(&mut run, &cfg)?;
    run.finish(&canonical, passed)?;
    Ok(Executed {
        dir,
        status: if passed { Status::Completed } else { Status::Failed },
    })
}

const MANIFEST: &str = "manifest.json";

/// One run directory being filled.
pub struct Run {
    dir: PathBuf,
    seed: u64,
    provenance: Provenance,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HveError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| HveError::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Writes `{"provenance": ..., key: payload}`.
    fn write_json<T: Serialize>(&mut self, name: &str, key: &str, payload: &T) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("provenance".into(), json!(self.provenance));
        obj.insert(key.into(), serde_json::to_value(payload).map_err(|e| HveError::json(name.to_string(), e))?);
        let mut text = serde_json::to_string_pretty(&Value::Object(obj)).map_err(|e| HveError::json(name.to_string(), e))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("{}\n{body}", self.provenance.comment());
        self.write_bytes(name, text.as_bytes())
    }

    fn record_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HveError::MissingArtifact(path.display().to_string()),
            _ => HveError::io(path, e),
        })?;
        self.inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(bytes)
    }

    fn finish(&mut self, config: &Value, passed: bool) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            let path = self.dir.join(name);
            let bytes = fs::read(&path).map_err(|e| HveError::io(&path, e))?;
            outputs.insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = json!({
            "provenance": self.provenance,
            "config": config,
            "inputs": self.inputs,
            "outputs": outputs,
            "passed": passed,
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| HveError::json("manifest", e))?;
        text.push('\n');
        let path = self.path(MANIFEST);
        fs::write(&path, text).map_err(|e| HveError::io(&path, e))
    }

    fn write_mdp(&mut self, mdp: &TabularMdp) -> Result<()> {
        let body: Value = serde_json::from_str(&mdp.to_json()).map_err(|e| HveError::json("MDP", e))?;
        self.write_json("mdp.json", "mdp", &body)
    }

    fn write_dataset(&mut self, ds: &OfflineDataset) -> Result<()> {
        let ds = ds.clone().with_meta(self.provenance.meta());
        self.write_bytes("dataset.jsonl", &ds.to_jsonl_bytes())
    }

    fn write_model(&mut self, model: &LearnedModel, mdp: &TabularMdp) -> Result<()> {
        self.write_json(
            "model.json",
            "model",
            &ModelPayload {
                env_hash: mdp.content_hash(),
                model: model.clone(),
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelPayload {
    env_hash: String,
    model: LearnedModel,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => HveError::MissingArtifact(path.display().to_string()),
        _ => HveError::io(path, e),
    })
}

/// Payload under `key` when the file is a provenance envelope, otherwise
/// the whole document.
fn unwrap_envelope(bytes: &[u8], key: &str, what: &str) -> Result<Value> {
    let mut v: Value = serde_json::from_slice(bytes).map_err(|e| HveError::json(what.to_string(), e))?;
    if let Value::Object(obj) = &mut v {
        if obj.contains_key("provenance") {
            return obj
                .remove(key)
                .ok_or_else(|| HveError::Config(format!("{what} has no `{key}` entry")));
        }
    }
    Ok(v)
}

pub(crate) fn read_policy(path: &Path) -> Result<TabularPolicy> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => HveError::MissingArtifact(path.display().to_string()),
        _ => HveError::io(path, e),
    })?;
    parse_policy(&bytes, &path.display().to_string())
}

fn parse_policy(bytes: &[u8], what: &str) -> Result<TabularPolicy> {
    let v = unwrap_envelope(bytes, "policy", what)?;
    serde_json::from_value(v).map_err(|e| HveError::json(what.to_string(), e))
}

struct Data {
    mdp: TabularMdp,
    dataset: OfflineDataset,
    behavior: Option<TabularPolicy>,
}

fn load_data(run: &mut Run, src: &DataSource) -> Result<Data> {
    match src {
        DataSource::Generate(g) => {
            g.validate()?;
            let mdp = g.env.build()?;
            let behavior = g.behavior.build(&mdp)?;
            let dataset = generate_dataset(&mdp, &behavior, &g.behavior.id(), g.n_trajectories, g.horizon, run.sub_seed("dataset"))?;
            Ok(Data {
                mdp,
                dataset,
                behavior: Some(behavior),
            })
        }
        DataSource::Run(dir) => {
            let mdp = load_mdp(run, &dir.join("mdp.json"))?;
            let ds_path = dir.join("dataset.jsonl");
            let bytes = run.record_input(&ds_path)?;
            let dataset = OfflineDataset::read_jsonl(bytes.as_slice())?;
            dataset.check_provenance(&mdp)?;
            let beh_path = dir.join("behavior.json");
            let behavior = if beh_path.is_file() {
                let bytes = run.record_input(&beh_path)?;
                Some(parse_policy(&bytes, &beh_path.display().to_string())?)
            } else {
                None
            };
            Ok(Data { mdp, dataset, behavior })
        }
    }
}

fn load_mdp(run: &mut Run, path: &Path) -> Result<TabularMdp> {
    let bytes = run.record_input(path)?;
    let v = unwrap_envelope(&bytes, "mdp", &path.display().to_string())?;
    TabularMdp::from_json(&v.to_string())
}

fn load_model(run: &mut Run, src: &ModelSource, data: &Data) -> Result<LearnedModel> {
    let model = match src {
        ModelSource::Run(dir) => load_model_file(run, &dir.join("model.json"), &data.mdp)?,
        ModelSource::Fit(cfg) => fit_model_ensemble(&data.dataset, cfg, run.sub_seed("model"))?,
        ModelSource::PerturbedTruth { strength, reward_noise } => {
            if !(0.0..=1.0).contains(strength) || !(0.0..=1.0).contains(reward_noise) {
                return Err(HveError::Config("perturbation strengths must lie in [0, 1]".into()));
            }
            scenarios::perturbed_model(&data.mdp, *strength, *reward_noise, run.sub_seed("model"))
        }
        ModelSource::Truth => LearnedModel::from_mdp(&data.mdp),
    };
    Ok(model)
}

fn load_model_file(run: &mut Run, path: &Path, mdp: &TabularMdp) -> Result<LearnedModel> {
    let bytes = run.record_input(path)?;
    let v = unwrap_envelope(&bytes, "model", &path.display().to_string())?;
    let payload: ModelPayload = serde_json::from_value(v).map_err(|e| HveError::json(path.display().to_string(), e))?;
    let found = mdp.content_hash();
    if payload.env_hash != found {
        return Err(HveError::Provenance {
            expected: payload.env_hash,
            found,
        });
    }
    Ok(payload.model)
}

fn estimate_behavior(data: &Data, est: &BehaviorEstimate) -> Result<TabularPolicy> {
    if !(est.floor >= 0.0 && est.floor * data.mdp.n_actions() as f64 <= 1.0) {
        return Err(HveError::Config(format!("behavior floor {} is infeasible", est.floor)));
    }
    Ok(fit_behavior_policy(&data.dataset, est.smoothing)?.policy.with_floor(est.floor))
}

fn run_gen(run: &mut Run, cfg: &GenConfig) -> Result<bool> {
    let data = load_data(run, &DataSource::Generate(cfg.clone()))?;
    run.write_mdp(&data.mdp)?;
    if let Some(b) = &data.behavior {
        run.write_json("behavior.json", "policy", b)?;
    }
    run.write_dataset(&data.dataset)?;
    Ok(true)
}

fn run_fit(run: &mut Run, cfg: &FitConfig) -> Result<bool> {
    let data = load_data(run, &cfg.data)?;
    let model = fit_model_ensemble(&data.dataset, &cfg.ensemble, run.sub_seed("model"))?;
    let clone = fit_behavior_policy(&data.dataset, cfg.behavior.smoothing)?;
    let floored = estimate_behavior(&data, &cfg.behavior)?;
    run.write_mdp(&data.mdp)?;
    run.write_dataset(&data.dataset)?;
    run.write_model(&model, &data.mdp)?;
    run.write_json(
        "behavior_estimate.json",
        "policy",
        &floored,
    )?;
    run.write_json("behavior_counts.json", "estimate", &clone)?;
    Ok(true)
}

fn run_ope(run: &mut Run, cfg: &OpeCliConfig) -> Result<bool> {
    let data = load_data(run, &cfg.data)?;
    let model = load_model(run, &cfg.model, &data)?;
    let pi_beta = estimate_behavior(&data, &cfg.behavior)?;
    let policies = match &cfg.policies {
        PolicySpec::EpsilonLadder { n } => {
            if *n == 0 {
                return Err(HveError::Config("epsilon ladder needs at least one policy".into()));
            }
            scenarios::epsilon_ladder(&data.mdp, *n)
                .into_iter()
                .map(|(label, policy)| LabeledPolicy { label, policy })
                .collect()
        }
        PolicySpec::Files { paths } => {
            let mut out = Vec::new();
            for p in paths {
                let bytes = run.record_input(p)?;
                let policy = parse_policy(&bytes, &p.display().to_string())?;
                let label = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                out.push(LabeledPolicy { label, policy });
            }
            out
        }
    };
    let mut set = PolicySet::new(policies)?;
    set.fill_true_values(&data.mdp)?;
    let report = ope::run_ope_suite(&data.dataset, &model, &pi_beta, &set, &cfg.ope, &data.mdp)?;
    run.write_json("report.json", "report", &report)?;
    run.write_csv("report.csv", &report.to_csv(""))?;
    Ok(true)
}

#[derive(Serialize)]
struct SweepSummary {
    divergences: crate::learning::DivergenceEstimates,
    selected_h: i32,
    min_true_error_h: i32,
}

fn run_sweep(run: &mut Run, cfg: &SweepConfig) -> Result<bool> {
    let data = load_data(run, &cfg.data)?;
    let model = load_model(run, &cfg.model, &data)?;
    let mdp = &data.mdp;
    let pi = match &cfg.target {
        TargetSpec::EpsilonOptimal { eps } => {
            if !(0.0..=1.0).contains(eps) {
                return Err(HveError::Config(format!("eps {eps} outside [0, 1]")));
            }
            let (opt, _) = optimal_policy(mdp)?;
            TabularPolicy::epsilon_greedy(mdp.n_actions(), &opt.greedy_actions(), *eps)?
        }
        TargetSpec::PoorModel => scenarios::poor_model_instance().pi,
        TargetSpec::File { path } => {
            let bytes = run.record_input(path)?;
            parse_policy(&bytes, &path.display().to_string())?
        }
    };
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(HveError::Config("target policy does not match the environment".into()));
    }
    let pi_beta = match &cfg.behavior {
        Some(spec) => spec.build(mdp)?,
        None => estimate_behavior(&data, &cfg.behavior_estimate)?,
    };
    let truth = match cfg.divergences {
        DivergenceMode::Oracle => Some(mdp),
        DivergenceMode::Empirical => None,
    };
    let div = estimate_divergences(&data.dataset, &model, &pi, &pi_beta, truth);
    let weighting = hve::IsWeighting {
        use_is: cfg.use_is,
        clip_eps: cfg.clip_eps,
    };
    let h_max = i32::try_from(cfg.h_max).map_err(|_| HveError::Config("h_max too large".into()))?;
    let rows = oracle::bound_vs_error_sweep(mdp, &data.dataset, &model, &pi, &pi_beta, -1..=h_max, weighting, &div)?;
    let selected_h = hve::select_h(&div, mdp.gamma(), mdp.r_max(), weighting.surrogate_eps(), cfg.h_max);
    let errors: Vec<f64> = rows.iter().map(|r| r.true_abs_error).collect();
    let min_true_error_h = hve::argmin_first(&errors) as i32 - 1;
    let mut csv = String::from("h,var_term,bias_term,model_term,total,true_abs_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.h, r.bound.var_term, r.bound.bias_term, r.bound.model_term, r.bound.total, r.true_abs_error
        ));
    }
    run.write_csv("sweep.csv", &csv)?;
    run.write_json(
        "sweep.json",
        "sweep",
        &SweepSummary {
            divergences: div,
            selected_h,
            min_true_error_h,
        },
    )?;
    Ok(true)
}

#[derive(Serialize, Deserialize)]
struct RlSummary {
    mohve: mohve::MohveConfig,
    epochs: usize,
    final_h: i32,
    final_beta: f64,
    final_kl: f64,
    final_value: f64,
    behavior_clone_value: f64,
    optimal_value: f64,
    snapshots: Vec<String>,
}

fn snapshot_file(label: &str) -> String {
    format!("snapshots/{label}.json")
}

fn run_rl(run: &mut Run, cfg: &RlConfig) -> Result<bool> {
    let data = load_data(run, &cfg.data)?;
    let mohve_cfg = mohve::MohveConfig {
        seed: run.seed,
        ..cfg.mohve.clone()
    };
    let (fitted, state) = mohve::train(&data.dataset, &mohve_cfg, Some(&data.mdp))?;
    let (opt, _) = optimal_policy(&data.mdp)?;
    let actor = state.actor();
    run.write_mdp(&data.mdp)?;
    run.write_dataset(&data.dataset)?;
    run.write_model(&fitted.model, &data.mdp)?;
    run.write_json("behavior_clone.json", "policy", &fitted.pi_beta)?;
    for snap in &state.snapshots {
        run.write_json(&snapshot_file(&snap.label), "snapshot", snap)?;
    }
    run.write_json("final_policy.json", "policy", &actor)?;
    let mut csv = String::from("epoch,true_value,current_h,beta,kl,expected_rho_sq,rho_sq_bound\n");
    for c in &state.curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.epoch,
            c.true_value.map(|v| v.to_string()).unwrap_or_default(),
            c.current_h,
            c.beta,
            c.kl,
            c.expected_rho_sq,
            c.rho_sq_bound
        ));
    }
    run.write_csv("curve.csv", &csv)?;
    let summary = RlSummary {
        mohve: mohve_cfg,
        epochs: state.epoch,
        final_h: state.current_h,
        final_beta: state.beta,
        final_kl: state.curve.last().map(|c| c.kl).unwrap_or(0.0),
        final_value: policy_value(&data.mdp, &actor)?,
        behavior_clone_value: policy_value(&data.mdp, &fit_behavior_policy(&data.dataset, 0.0)?.policy)?,
        optimal_value: policy_value(&data.mdp, &opt)?,
        snapshots: state.snapshots.iter().map(|s| s.label.clone()).collect(),
    };
    run.write_json("summary.json", "summary", &summary)?;
    Ok(true)
}

#[derive(Serialize)]
struct SelectedSnapshot {
    #[serde(flatten)]
    ranked: mohve::RankedSnapshot,
    true_value: f64,
}

#[derive(Serialize)]
struct Selection {
    k: usize,
    top: Vec<SelectedSnapshot>,
    best_selected_true_value: f64,
    uniform_top_k_value: f64,
    best_snapshot_true_value: f64,
}

fn run_select(run: &mut Run, cfg: &SelectConfig) -> Result<bool> {
    if cfg.k == 0 {
        return Err(HveError::Config("k must be at least 1".into()));
    }
    let dir = &cfg.run;
    let summary_path = dir.join("summary.json");
    let bytes = run.record_input(&summary_path)?;
    let v = unwrap_envelope(&bytes, "summary", &summary_path.display().to_string())?;
    let summary: RlSummary = serde_json::from_value(v).map_err(|e| HveError::json("rl summary", e))?;
    let data = load_data(run, &DataSource::Run(dir.clone()))?;
    let model = load_model_file(run, &dir.join("model.json"), &data.mdp)?;
    let clone_path = dir.join("behavior_clone.json");
    let bytes = run.record_input(&clone_path)?;
    let pi_beta = parse_policy(&bytes, "behavior clone")?;
    let mut snapshots = Vec::new();
    for label in &summary.snapshots {
        let path = dir.join(snapshot_file(label));
        let bytes = run.record_input(&path)?;
        let v = unwrap_envelope(&bytes, "snapshot", &path.display().to_string())?;
        let snap: Snapshot = serde_json::from_value(v).map_err(|e| HveError::json(path.display().to_string(), e))?;
        snapshots.push(snap);
    }
    if snapshots.is_empty() {
        return Err(HveError::MissingArtifact(format!("{}: no snapshots", dir.display())));
    }
    let hve_cfg = cfg.hve.unwrap_or_else(|| summary.mohve.hve());
    let ranked = mohve::select_policy_offline(&snapshots, &data.dataset, &model, &pi_beta, &hve_cfg, data.mdp.rho0(), cfg.k)?;
    let true_values = snapshots
        .iter()
        .map(|s| policy_value(&data.mdp, &s.policy))
        .collect::<Result<Vec<_>>>()?;
    let value_of = |label: &str| {
        snapshots
            .iter()
            .position(|s| s.label == label)
            .map(|i| true_values[i])
            .unwrap_or(f64::NAN)
    };
    let top: Vec<SelectedSnapshot> = ranked
        .into_iter()
        .map(|r| SelectedSnapshot {
            true_value: value_of(&r.label),
            ranked: r,
        })
        .collect();
    let selection = Selection {
        k: cfg.k,
        best_selected_true_value: top.iter().map(|t| t.true_value).fold(f64::NEG_INFINITY, f64::max),
        uniform_top_k_value: mohve::uniform_top_k_value(&true_values, cfg.k),
        best_snapshot_true_value: true_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        top,
    };
    run.write_json("selection.json", "selection", &selection)?;
    Ok(true)
}

fn run_verify(run: &mut Run, cfg: &VerifyConfig) -> Result<bool> {
    let ids: Vec<u32> = if cfg.criteria.is_empty() {
        verify::CRITERIA.iter().map(|c| c.0).collect()
    } else {
        cfg.criteria.clone()
    };
    let scratch = run.path("scratch");
    let mut outcomes = Vec::new();
    for id in ids {
        let outcome = verify::run_criterion(id, run.seed, &scratch)?;
        eprintln!("{}", outcome.line());
        outcomes.push(outcome);
    }
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| HveError::io(&scratch, e))?;
    }
    let passed = outcomes.iter().all(|o| o.passed);
    run.write_json("verify.json", "outcomes", &outcomes)?;
    Ok(passed)
}

/// Small configs exercising every subcommand except `verify`, chained
/// through run directories under `out`.
fn pipeline(out: &Path, configs: &Path, seed: u64, jobs: usize) -> Result<()> {
    fs::create_dir_all(configs).map_err(|e| HveError::io(configs, e))?;
    let exec = |command: Command, cfg: Value| -> Result<PathBuf> {
        let path = configs.join(format!("{}.json", command.name()));
        fs::write(&path, cfg.to_string()).map_err(|e| HveError::io(&path, e))?;
        let cli = Cli {
            command,
            config: Some(path),
            seed,
            out: out.to_path_buf(),
            jobs,
            force: false,
        };
        Ok(execute(&cli)?.dir)
    };
    let gen = exec(Command::Gen, json!({"n_trajectories": 10, "horizon": 20}))?;
    let fit = exec(Command::Fit, json!({"data": {"run": gen}}))?;
    exec(Command::Ope, json!({"data": {"run": gen}, "model": {"run": fit}, "policies": {"kind": "epsilon_ladder", "n": 4}}))?;
    exec(Command::SweepH, json!({"h_max": 8}))?;
    let rl = exec(
        Command::Rl,
        json!({"mohve": {"epochs": 60, "snapshot_interval": 20, "n_h": 30, "rollout_batch": 8}}),
    )?;
    exec(Command::Select, json!({"run": rl, "k": 2}))?;
    Ok(())
}

fn collect_files(root: &Path, rel: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
    let dir = root.join(rel);
    let mut entries: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| HveError::io(&dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| HveError::io(&dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let rel_child = rel.join(e.file_name());
        if e.path().is_dir() {
            collect_files(root, &rel_child, out)?;
        } else {
            let bytes = fs::read(e.path()).map_err(|err| HveError::io(e.path(), err))?;
            out.insert(rel_child, bytes);
        }
    }
    Ok(())
}

/// Runs the pipeline twice (default pool, then one thread) into the same
/// output directory and compares every file byte for byte; then checks a
/// rerun is a cache hit.
pub fn determinism_check(workdir: &Path) -> Result<(bool, String)> {
    let out = workdir.join("runs");
    let configs = workdir.join("configs");
    let mut trees = Vec::new();
    for (pass, jobs) in [(0, 0), (1, 1)] {
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| HveError::io(&out, e))?;
        }
        pipeline(&out, &configs, 7, jobs)?;
        let mut files = BTreeMap::new();
        collect_files(&out, Path::new(""), &mut files)?;
        trees.push(files);
        if pass == 0 {
            let kept = workdir.join("first");
            if kept.exists() {
                fs::remove_dir_all(&kept).map_err(|e| HveError::io(&kept, e))?;
            }
            fs::rename(&out, &kept).map_err(|e| HveError::io(&out, e))?;
        }
    }
    let (a, b) = (&trees[0], &trees[1]);
    let mut differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    differing.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| k.display().to_string()));
    let cli = Cli {
        command: Command::Gen,
        config: Some(configs.join("gen.json")),
        seed: 7,
        out: out.clone(),
        jobs: 0,
        force: false,
    };
    let cached = execute(&cli)?.status == Status::CacheHit;
    Ok((
        differing.is_empty() && cached && !a.is_empty(),
        format!(
            "{} files across 6 subcommands, {} differ between runs (default pool vs 1 thread){}; rerun cache hit: {cached}",
            a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" [{}]", differing.join(", "))
            }
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hve").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn parses_global_flags_after_subcommand() {
        let c = cli(&["sweep-h", "--seed", "3", "--jobs", "1", "--force"]);
        assert_eq!(c.command, Command::SweepH);
        assert_eq!((c.seed, c.jobs, c.force), (3, 1, true));
        assert_eq!(c.out, PathBuf::from("runs"));
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&HveError::Config("x".into())), 2);
        assert_eq!(exit_code(&HveError::MissingArtifact("x".into())), 3);
        assert_eq!(
            exit_code(&HveError::Provenance {
                expected: "a".into(),
                found: "b".into()
            }),
            4
        );
    }

    #[test]
    fn envelope_unwraps_and_passes_bare_documents() {
        let wrapped = br#"{"provenance": {}, "policy": [1]}"#;
        assert_eq!(unwrap_envelope(wrapped, "policy", "t").unwrap(), json!([1]));
        let bare = br#"{"probs": [1]}"#;
        assert_eq!(unwrap_envelope(bare, "policy", "t").unwrap(), json!({"probs": [1]}));
        assert!(unwrap_envelope(wrapped, "model", "t").is_err());
    }

    #[test]
    fn gen_then_cache_hit() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().to_str().unwrap();
        let first = execute(&cli(&["gen", "--out", out, "--seed", "5"])).unwrap();
        assert_eq!(first.status, Status::Completed);
        for f in ["mdp.json", "behavior.json", "dataset.jsonl", "manifest.json"] {
            assert!(first.dir.join(f).is_file(), "{f}");
        }
        let second = execute(&cli(&["gen", "--out", out, "--seed", "5"])).unwrap();
        assert_eq!(second.status, Status::CacheHit);
        assert_eq!(first.dir, second.dir);
        let other = execute(&cli(&["gen", "--out", out, "--seed", "6"])).unwrap();
        assert_ne!(other.dir, first.dir);
        let mdp = load_mdp_for_test(&first.dir);
        let ds = OfflineDataset::load(first.dir.join("dataset.jsonl"), Some(&mdp)).unwrap();
        assert_eq!(ds.meta().get("subcommand").map(String::as_str), Some("gen"));
    }

    fn load_mdp_for_test(dir: &Path) -> TabularMdp {
        let bytes = fs::read(dir.join("mdp.json")).unwrap();
        TabularMdp::from_json(&unwrap_envelope(&bytes, "mdp", "mdp").unwrap().to_string()).unwrap()
    }

    #[test]
    fn model_from_other_environment_is_provenance_error() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().to_str().unwrap();
        let fit = execute(&cli(&["fit", "--out", out])).unwrap().dir;
        let cfg_path = tmp.path().join("ope.json");
        fs::write(
            &cfg_path,
            json!({"data": {"generate": {"env": {"kind": "rl_gridworld"}}}, "model": {"run": fit}}).to_string(),
        )
        .unwrap();
        let err = execute(&cli(&["ope", "--out", out, "--config", cfg_path.to_str().unwrap()])).unwrap_err();
        assert_eq!(exit_code(&err), 4, "{err}");
    }
}
