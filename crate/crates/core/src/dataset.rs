//! Offline datasets of behavior-policy trajectories, indexed for H-step
//! segment lookup.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_index, HveError, Result};
use crate::mdp::{rollout, Step, TabularMdp, TabularPolicy, Trajectory};
use crate::par;
use crate::rng;

pub const DATASET_FORMAT: &str = "hve-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Location of one step inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Occurrence {
    pub trajectory: usize,
    pub offset: usize,
}

/// A contiguous run of `len` steps from one trajectory: states
/// `s_0..s_len`, actions `a_0..a_{len-1}`, rewards `r_0..r_{len-1}`.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub origin: Occurrence,
    steps: &'a [Step],
}

impl<'a> Segment<'a> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &'a [Step] {
        self.steps
    }

    /// `s_t` for `t` in `0..=len`.
    pub fn state(&self, t: usize) -> usize {
        if t == self.steps.len() {
            self.steps[t - 1].next_state
        } else {
            self.steps[t].state
        }
    }

    pub fn action(&self, t: usize) -> usize {
        self.steps[t].action
    }

    pub fn reward(&self, t: usize) -> f64 {
        self.steps[t].reward
    }

    pub fn final_state(&self) -> usize {
        self.state(self.steps.len())
    }
}

/// Result of a segment lookup: admissible segments plus the occurrences
/// whose trajectory ends too early.
#[derive(Debug, Clone)]
pub struct SegmentQuery<'a> {
    pub segments: Vec<Segment<'a>>,
    pub short: Vec<Occurrence>,
}

/// Immutable set of trajectories with a `(s, a) -> occurrences` index.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    n_states: usize,
    n_actions: usize,
    trajectories: Vec<Trajectory>,
    behavior_id: String,
    env_hash: String,
    seed: u64,
    meta: BTreeMap<String, String>,
    index: Vec<Vec<Occurrence>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    format_version: u32,
    n_states: usize,
    n_actions: usize,
    behavior_id: String,
    env_hash: String,
    seed: u64,
    n_trajectories: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl OfflineDataset {
    pub fn from_trajectories(
        n_states: usize,
        n_actions: usize,
        trajectories: Vec<Trajectory>,
        behavior_id: impl Into<String>,
        env_hash: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let mut index = vec![Vec::new(); n_states * n_actions];
        for (i, traj) in trajectories.iter().enumerate() {
            if !traj.is_chained() {
                return Err(HveError::Config(format!("trajectory {i} does not chain")));
            }
            for (t, step) in traj.steps.iter().enumerate() {
                check_index("state", step.state, n_states)?;
                check_index("state", step.next_state, n_states)?;
                check_index("action", step.action, n_actions)?;
                index[step.state * n_actions + step.action].push(Occurrence {
                    trajectory: i,
                    offset: t,
                });
            }
        }
        Ok(OfflineDataset {
            n_states,
            n_actions,
            trajectories,
            behavior_id: behavior_id.into(),
            env_hash: env_hash.into(),
            seed,
            meta: BTreeMap::new(),
            index,
        })
    }

    /// Attaches provenance key/value pairs written into the file header.
    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }
    pub fn behavior_id(&self) -> &str {
        &self.behavior_id
    }
    pub fn env_hash(&self) -> &str {
        &self.env_hash
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn is_empty(&self) -> bool {
        self.total_steps() == 0
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.trajectories.iter().flat_map(|t| t.steps.iter())
    }

    /// Every stored occurrence of `(s, a)`, in trajectory/offset order.
    pub fn occurrences(&self, s: usize, a: usize) -> &[Occurrence] {
        &self.index[s * self.n_actions + a]
    }

    pub fn occurrence_count(&self, s: usize, a: usize) -> usize {
        self.occurrences(s, a).len()
    }

    /// Occurrence counts `[s][a]`.
    pub fn sa_counts(&self) -> Vec<usize> {
        self.index.iter().map(Vec::len).collect()
    }

    /// Empirical state frequencies over all stored steps.
    pub fn state_frequencies(&self) -> Vec<f64> {
        let total = self.total_steps().max(1) as f64;
        let mut f = vec![0.0; self.n_states];
        for (sa, occ) in self.index.iter().enumerate() {
            f[sa / self.n_actions] += occ.len() as f64;
        }
        f.iter_mut().for_each(|x| *x /= total);
        f
    }

    /// Empirical state-action frequencies `[s][a]`.
    pub fn sa_frequencies(&self) -> Vec<f64> {
        let total = self.total_steps().max(1) as f64;
        self.index.iter().map(|o| o.len() as f64 / total).collect()
    }

    /// All length-`len` segments starting at `(s, a)`.
    pub fn segments_from(&self, s: usize, a: usize, len: usize) -> Result<SegmentQuery<'_>> {
        if len == 0 {
            return Err(HveError::Config("segment length must be at least 1".into()));
        }
        check_index("state", s, self.n_states)?;
        check_index("action", a, self.n_actions)?;
        let mut segments = Vec::new();
        let mut short = Vec::new();
        for &occ in self.occurrences(s, a) {
            let steps = &self.trajectories[occ.trajectory].steps;
            if occ.offset + len <= steps.len() {
                segments.push(Segment {
                    origin: occ,
                    steps: &steps[occ.offset..occ.offset + len],
                });
            } else {
                short.push(occ);
            }
        }
        Ok(SegmentQuery { segments, short })
    }

    /// Checks that this dataset was generated from `mdp`.
    pub fn check_provenance(&self, mdp: &TabularMdp) -> Result<()> {
        let found = mdp.content_hash();
        if found != self.env_hash {
            return Err(HveError::Provenance {
                expected: self.env_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            format_version: DATASET_FORMAT_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            behavior_id: self.behavior_id.clone(),
            env_hash: self.env_hash.clone(),
            seed: self.seed,
            n_trajectories: self.trajectories.len(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for traj in &self.trajectories {
            serde_json::to_writer(&mut w, traj)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        out
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| HveError::Config("dataset file has no header".into()))?
            .map_err(|e| HveError::io("<dataset>", e))?;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| HveError::json("dataset header", e))?;
        if header.format != DATASET_FORMAT || header.format_version != DATASET_FORMAT_VERSION {
            return Err(HveError::Config(format!(
                "unsupported dataset format {} v{}",
                header.format, header.format_version
            )));
        }
        let mut trajectories = Vec::with_capacity(header.n_trajectories);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| HveError::io("<dataset>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let traj: Trajectory = serde_json::from_str(&line)
                .map_err(|e| HveError::json(format!("dataset trajectory {i}"), e))?;
            trajectories.push(traj);
        }
        if trajectories.len() != header.n_trajectories {
            return Err(HveError::Config(format!(
                "dataset header announces {} trajectories, file has {}",
                header.n_trajectories,
                trajectories.len()
            )));
        }
        Ok(Self::from_trajectories(
            header.n_states,
            header.n_actions,
            trajectories,
            header.behavior_id,
            header.env_hash,
            header.seed,
        )?
        .with_meta(header.meta))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| HveError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| HveError::io(path, e))?;
        w.flush().map_err(|e| HveError::io(path, e))
    }

    /// Loads a dataset; when `mdp` is given its content hash must match the
    /// dataset's recorded environment.
    pub fn load(path: impl AsRef<Path>, mdp: Option<&TabularMdp>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HveError::MissingArtifact(path.display().to_string()),
            _ => HveError::io(path, e),
        })?;
        let ds = Self::read_jsonl(BufReader::new(file))?;
        if let Some(mdp) = mdp {
            ds.check_provenance(mdp)?;
        }
        Ok(ds)
    }
}

/// Rolls out `behavior` from `rho0` `n_traj` times. Trajectory `i` uses its
/// own substream, so the result does not depend on thread scheduling.
pub fn generate_dataset(
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    behavior_id: &str,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_traj == 0 {
        return Err(HveError::Config("n_traj must be at least 1".into()));
    }
    let trajectories = par::map_indices(n_traj, |i| {
        let mut rng = rng::indexed_stream(seed, "trajectory", i as u64);
        rollout(mdp, behavior, None, horizon, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    OfflineDataset::from_trajectories(
        mdp.n_states(),
        mdp.n_actions(),
        trajectories,
        behavior_id,
        mdp.content_hash(),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardSpec;

    fn step(s: usize, a: usize, r: f64, s2: usize) -> Step {
        Step {
            state: s,
            action: a,
            reward: r,
            next_state: s2,
        }
    }

    fn hand_dataset() -> OfflineDataset {
        // traj 0: (0,0)->1 (1,1)->0 (0,0)->2
        // traj 1: (2,1)->0 (0,0)->1
        let t0 = Trajectory {
            steps: vec![step(0, 0, 1.0, 1), step(1, 1, 0.5, 0), step(0, 0, 0.0, 2)],
            truncated: true,
        };
        let t1 = Trajectory {
            steps: vec![step(2, 1, 0.25, 0), step(0, 0, 1.0, 1)],
            truncated: true,
        };
        OfflineDataset::from_trajectories(3, 2, vec![t0, t1], "hand", "h", 0).unwrap()
    }

    fn tiny_mdp() -> TabularMdp {
        let r = RewardSpec::Bernoulli { p: 0.5 };
        TabularMdp::new(2, 2, vec![0.5; 8], vec![r; 4], vec![0.5, 0.5], 0.9, 1.0).unwrap()
    }

    #[test]
    fn hand_segments() {
        let ds = hand_dataset();
        let q = ds.segments_from(0, 0, 1).unwrap();
        // all three occurrences of (0,0) have at least one step
        let origins: Vec<_> = q.segments.iter().map(|s| (s.origin.trajectory, s.origin.offset)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 2), (1, 1)]);
        assert!(q.short.is_empty());

        let q = ds.segments_from(0, 0, 2).unwrap();
        assert_eq!(q.segments.len(), 1);
        let seg = q.segments[0];
        assert_eq!((seg.state(0), seg.state(1), seg.state(2)), (0, 1, 0));
        assert_eq!((seg.action(0), seg.action(1)), (0, 1));
        assert_eq!((seg.reward(0), seg.reward(1)), (1.0, 0.5));
        assert_eq!(
            q.short,
            vec![
                Occurrence { trajectory: 0, offset: 2 },
                Occurrence { trajectory: 1, offset: 1 }
            ]
        );

        assert!(ds.segments_from(1, 0, 1).unwrap().segments.is_empty());
        assert!(ds.segments_from(0, 0, 0).is_err());
    }

    #[test]
    fn index_covers_every_step_once() {
        let ds = hand_dataset();
        assert_eq!(ds.sa_counts().iter().sum::<usize>(), ds.total_steps());
        let mut all = Vec::new();
        for s in 0..3 {
            for a in 0..2 {
                all.extend_from_slice(ds.occurrences(s, a));
            }
        }
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ds.total_steps());
    }

    #[test]
    fn zero_trajectories_rejected() {
        let mdp = tiny_mdp();
        assert!(generate_dataset(&mdp, &TabularPolicy::uniform(2, 2), "u", 0, 5, 1).is_err());
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let mdp = tiny_mdp();
        let pi = TabularPolicy::uniform(2, 2);
        let a = generate_dataset(&mdp, &pi, "u", 50, 10, 7).unwrap();
        let b = generate_dataset(&mdp, &pi, "u", 50, 10, 7).unwrap();
        assert_eq!(a.to_jsonl_bytes(), b.to_jsonl_bytes());
        let c = generate_dataset(&mdp, &pi, "u", 50, 10, 8).unwrap();
        assert_ne!(a.to_jsonl_bytes(), c.to_jsonl_bytes());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = OfflineDataset::from_trajectories(2, 2, vec![], "none", "abc", 3).unwrap();
        let back = OfflineDataset::read_jsonl(ds.to_jsonl_bytes().as_slice()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn provenance_mismatch_is_reported() {
        let mdp = tiny_mdp();
        let other = mdp.with_gamma(0.5).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(2, 2), "u", 3, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save(&path).unwrap();
        assert!(OfflineDataset::load(&path, Some(&mdp)).is_ok());
        assert!(matches!(
            OfflineDataset::load(&path, Some(&other)),
            Err(HveError::Provenance { .. })
        ));
        assert!(matches!(
            OfflineDataset::load(dir.path().join("missing.jsonl"), None),
            Err(HveError::MissingArtifact(_))
        ));
    }
}
