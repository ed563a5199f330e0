//! Hybrid value estimation: `H` steps of logged rewards (optionally
//! reweighted by clipped cumulative importance ratios) followed by a
//! bootstrap from the model-induced Q table.

mod bound;
mod variance;

pub use bound::{
    argmin_first, bound_curve, clip_ratio, eps_model_model_hat, error_bound, f_coefficient, select_h,
    variance_surrogate, ErrorBoundTerms,
};
pub use variance::{variance_decomposition, VarianceDecomposition};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{OfflineDataset, Segment};
use crate::error::{HveError, Result};
use crate::learning::{estimate_divergences, DivergenceEstimates, LearnedModel};
use crate::mdp::{evaluate_q, QTable, TabularPolicy};
use crate::par;

/// Step length: a fixed `H >= -1`, or chosen by minimizing the error bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HStep {
    Fixed(i32),
    Auto,
}

impl Serialize for HStep {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HStep::Fixed(h) => s.serialize_i32(*h),
            HStep::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for HStep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(h) if h >= -1 => Ok(HStep::Fixed(h)),
            Raw::Int(h) => Err(serde::de::Error::custom(format!("h_step {h} < -1"))),
            Raw::Str(s) if s == "auto" => Ok(HStep::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("h_step must be an integer or \"auto\", got {s:?}"))),
        }
    }
}

/// How logged rewards are reweighted toward the target policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsWeighting {
    pub use_is: bool,
    /// Clipping half-width for the cumulative ratio; `None` leaves it
    /// unclipped.
    pub clip_eps: Option<f64>,
}

impl IsWeighting {
    pub const OFF: IsWeighting = IsWeighting {
        use_is: false,
        clip_eps: None,
    };

    /// Per-step ratio `pi(a|s) / pi_beta(a|s)`, or 1 when IS is off.
    #[inline]
    pub fn step_ratio(&self, pi: &TabularPolicy, pi_beta: &TabularPolicy, s: usize, a: usize) -> f64 {
        if !self.use_is {
            return 1.0;
        }
        let (p, b) = (pi.prob(s, a), pi_beta.prob(s, a));
        if b > 0.0 {
            p / b
        } else if p == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// Weight applied to the reward at a step with cumulative ratio `w`.
    #[inline]
    pub fn weight(&self, cumulative: f64) -> f64 {
        match (self.use_is, self.clip_eps) {
            (false, _) => 1.0,
            (true, Some(eps)) => clip_ratio(cumulative, eps),
            (true, None) => cumulative,
        }
    }

    /// Clipping width entering the variance surrogate.
    pub fn surrogate_eps(&self) -> f64 {
        match (self.use_is, self.clip_eps) {
            (false, _) => 0.0,
            (true, Some(eps)) => eps,
            (true, None) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HveConfig {
    pub h_step: HStep,
    pub h_max: usize,
    /// `null` disables clipping.
    pub clip_eps: Option<f64>,
    pub gamma: f64,
    pub r_max: f64,
    pub use_is: bool,
}

impl Default for HveConfig {
    fn default() -> Self {
        HveConfig {
            h_step: HStep::Auto,
            h_max: 4,
            clip_eps: Some(0.1),
            gamma: 0.9,
            r_max: 1.0,
            use_is: true,
        }
    }
}

impl HveConfig {
    pub fn weighting(&self) -> IsWeighting {
        IsWeighting {
            use_is: self.use_is,
            clip_eps: self.clip_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let HStep::Fixed(h) = self.h_step {
            if h < -1 || h > self.h_max as i32 {
                return Err(HveError::Config(format!("h_step {h} outside -1..={}", self.h_max)));
            }
        }
        if let Some(eps) = self.clip_eps {
            if !(eps >= 0.0) {
                return Err(HveError::Config(format!("clip_eps {eps} must be >= 0")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(HveError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        Ok(())
    }

    /// Resolves `Auto` against the given divergence estimates.
    pub fn resolve_h(&self, div: &DivergenceEstimates) -> i32 {
        match self.h_step {
            HStep::Fixed(h) => h,
            HStep::Auto => select_h(div, self.gamma, self.r_max, self.weighting().surrogate_eps(), self.h_max),
        }
    }
}

/// `Q^` of `pi` inside the elite-averaged model with learned rewards.
pub fn model_q(model: &LearnedModel, pi: &TabularPolicy, gamma: f64) -> Result<QTable> {
    evaluate_q(model.n_states(), model.n_actions(), model.transition(), model.reward(), pi, gamma)
}

/// One hybrid target:
/// `sum_{t=0}^{h} w_t g^t r_t + g^(h+1) E_{a ~ pi} Q^(s_{h+1}, a)`, where
/// `w_t` is the (clipped) cumulative ratio `rho_{1:t}` with `rho_{1:0} = 1`.
/// `h = -1` returns `Q^(s_0, a_0)`.
pub fn hybrid_target(
    segment: &Segment<'_>,
    h: i32,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    q_hat: &QTable,
    gamma: f64,
    weighting: IsWeighting,
) -> Result<f64> {
    if h < 0 {
        return Ok(q_hat.get(segment.state(0), segment.action(0)));
    }
    let steps = h as usize + 1;
    if segment.len() < steps {
        return Err(HveError::SegmentTooShort {
            needed: steps,
            available: segment.len(),
        });
    }
    let mut target = 0.0;
    let mut cumulative = 1.0;
    let mut disc = 1.0;
    for t in 0..steps {
        if t > 0 {
            cumulative *= weighting.step_ratio(pi, pi_beta, segment.state(t), segment.action(t));
        }
        target += weighting.weight(cumulative) * disc * segment.reward(t);
        disc *= gamma;
    }
    target += disc * q_hat.state_value(pi, segment.state(steps));
    Ok(target)
}

/// Hybrid Q table plus the number of segments behind each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct HveEstimate {
    pub q: QTable,
    /// Admissible segments per `(s, a)`; 0 means the entry fell back to the
    /// model value.
    pub coverage: Vec<usize>,
    pub h: i32,
}

/// `Q~(s, a)` = mean hybrid target over all admissible segments from
/// `(s, a)`, falling back to `Q^(s, a)` where there are none.
pub fn hybrid_q(
    dataset: &OfflineDataset,
    q_hat: &QTable,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    h: i32,
    gamma: f64,
    weighting: IsWeighting,
) -> Result<HveEstimate> {
    let (ns, na) = (q_hat.n_states, q_hat.n_actions);
    if h < 0 {
        return Ok(HveEstimate {
            q: q_hat.clone(),
            coverage: vec![0; ns * na],
            h,
        });
    }
    let cells = par::map_indices(ns * na, |sa| -> Result<(f64, usize)> {
        let (s, a) = (sa / na, sa % na);
        let query = dataset.segments_from(s, a, h as usize + 1)?;
        if query.segments.is_empty() {
            return Ok((q_hat.get(s, a), 0));
        }
        let mut sum = 0.0;
        for seg in &query.segments {
            sum += hybrid_target(seg, h, pi, pi_beta, q_hat, gamma, weighting)?;
        }
        Ok((sum / query.segments.len() as f64, query.segments.len()))
    });
    let mut q = QTable::zeros(ns, na);
    let mut coverage = vec![0; ns * na];
    for (sa, cell) in cells.into_iter().enumerate() {
        let (v, n) = cell?;
        q.values[sa] = v;
        coverage[sa] = n;
    }
    Ok(HveEstimate { q, coverage, h })
}

/// Full estimator: builds `Q^` from the model, resolves the step length
/// (estimating divergences from data when it is `Auto`) and splices in the
/// logged returns.
pub fn hve_estimate(
    dataset: &OfflineDataset,
    model: &LearnedModel,
    pi: &TabularPolicy,
    pi_beta: &TabularPolicy,
    cfg: &HveConfig,
) -> Result<HveEstimate> {
    cfg.validate()?;
    let q_hat = model_q(model, pi, cfg.gamma)?;
    let h = match cfg.h_step {
        HStep::Fixed(h) => h,
        HStep::Auto => cfg.resolve_h(&estimate_divergences(dataset, model, pi, pi_beta, None)),
    };
    hybrid_q(dataset, &q_hat, pi, pi_beta, h, cfg.gamma, cfg.weighting())
}
