use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{HveError, Result};
use crate::rng::Rng;

/// Per-(state, action) reward distribution. Every support lies in
/// `[0, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Deterministic { value: f64 },
    /// Pays `r_max` with probability `p`, else 0.
    Bernoulli { p: f64 },
    /// `N(mean, std^2)` clamped to `[0, r_max]`.
    TruncatedGaussian { mean: f64, std: f64 },
}

impl RewardSpec {
    pub fn validate(&self, r_max: f64) -> Result<()> {
        let ok = match *self {
            RewardSpec::Deterministic { value } => (0.0..=r_max).contains(&value),
            RewardSpec::Bernoulli { p } => (0.0..=1.0).contains(&p),
            RewardSpec::TruncatedGaussian { mean, std } => mean.is_finite() && std >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HveError::Config(format!(
                "reward {self:?} outside [0, {r_max}]"
            )))
        }
    }

    pub fn mean(&self, r_max: f64) -> f64 {
        match *self {
            RewardSpec::Deterministic { value } => value,
            RewardSpec::Bernoulli { p } => p * r_max,
            RewardSpec::TruncatedGaussian { mean, std } => clamped_gaussian_moments(mean, std, r_max).0,
        }
    }

    pub fn variance(&self, r_max: f64) -> f64 {
        match *self {
            RewardSpec::Deterministic { .. } => 0.0,
            RewardSpec::Bernoulli { p } => p * (1.0 - p) * r_max * r_max,
            RewardSpec::TruncatedGaussian { mean, std } => {
                let (m1, m2) = clamped_gaussian_moments(mean, std, r_max);
                (m2 - m1 * m1).max(0.0)
            }
        }
    }

    pub fn sample(&self, r_max: f64, rng: &mut Rng) -> f64 {
        match *self {
            RewardSpec::Deterministic { value } => value,
            RewardSpec::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    r_max
                } else {
                    0.0
                }
            }
            RewardSpec::TruncatedGaussian { mean, std } => {
                if std == 0.0 {
                    return mean.clamp(0.0, r_max);
                }
                let x = Normal::new(mean, std)
                    .expect("validated std")
                    .sample(rng);
                x.clamp(0.0, r_max)
            }
        }
    }
}

/// First two raw moments of `clamp(X, 0, r_max)` with `X ~ N(mean, std^2)`.
fn clamped_gaussian_moments(mean: f64, std: f64, r_max: f64) -> (f64, f64) {
    if std == 0.0 {
        let v = mean.clamp(0.0, r_max);
        return (v, v * v);
    }
    let z = StdNormal::new(0.0, 1.0).expect("standard normal");
    let lo = (0.0 - mean) / std;
    let hi = (r_max - mean) / std;
    let (cdf_lo, cdf_hi) = (z.cdf(lo), z.cdf(hi));
    let (pdf_lo, pdf_hi) = (z.pdf(lo), z.pdf(hi));
    let mass = cdf_hi - cdf_lo;
    let above = 1.0 - cdf_hi;
    // E[X 1{0<X<r_max}] and E[X^2 1{0<X<r_max}]
    let m1_mid = mean * mass + std * (pdf_lo - pdf_hi);
    let m2_mid = std * std * (mass + lo * pdf_lo - hi * pdf_hi)
        + 2.0 * mean * std * (pdf_lo - pdf_hi)
        + mean * mean * mass;
    (r_max * above + m1_mid, r_max * r_max * above + m2_mid)
}
