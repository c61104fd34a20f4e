//! Element-wise activations and their guarded inverses.
//!
//! Chaining layers needs `φ⁻¹` applied to codes that are not guaranteed to lie
//! in the activation's range. [`invert`] therefore perturbs each entry with
//! optional Gaussian noise, clamps it into `[lo + δ, hi − δ]` and only then
//! applies the closed-form inverse, so the output is always finite.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GaussianStream, Matrix, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    /// Open range `(lo, hi)` of the activation.
    pub fn range(self) -> (f64, f64) {
        match self {
            ActivationKind::Tanh => (-1.0, 1.0),
            ActivationKind::Sigmoid => (0.0, 1.0),
            ActivationKind::Identity => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn is_bounded(self) -> bool {
        !matches!(self, ActivationKind::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn apply_value(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => libm::tanh(x),
            ActivationKind::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + libm::exp(-x))
                } else {
                    let e = libm::exp(x);
                    e / (1.0 + e)
                }
            }
            ActivationKind::Identity => x,
        }
    }

    /// Clamps `x` into the guarded range `[lo + margin, hi − margin]`.
    /// Infinite inputs land on the nearest bound; identity only bounds ±∞.
    pub fn clamp_value(self, x: f64, margin: f64) -> f64 {
        match self {
            ActivationKind::Identity => x.clamp(f64::MIN, f64::MAX),
            _ => {
                let (lo, hi) = self.range();
                x.clamp(lo + margin, hi - margin)
            }
        }
    }

    /// Closed-form inverse, valid on the open range.
    pub fn inverse_value(self, y: f64) -> f64 {
        match self {
            ActivationKind::Tanh => libm::atanh(y),
            ActivationKind::Sigmoid => libm::log(y) - libm::log1p(-y),
            ActivationKind::Identity => y,
        }
    }
}

impl core::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::InvalidSpec(format!("unknown activation '{other}'"))),
        }
    }
}

/// Stabilization applied before inverting an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionGuard {
    /// Distance kept from the range endpoints.
    pub clamp_margin: f64,
    /// Standard deviation of the additive noise; 0 disables it.
    pub noise_sigma: f64,
    pub seed: RngSeed,
}

impl Default for InversionGuard {
    fn default() -> Self {
        Self {
            clamp_margin: 1e-6,
            noise_sigma: 1e-4,
            seed: RngSeed(0),
        }
    }
}

impl InversionGuard {
    pub fn noiseless(clamp_margin: f64) -> Self {
        Self {
            clamp_margin,
            noise_sigma: 0.0,
            seed: RngSeed(0),
        }
    }

    pub fn with_seed(self, seed: RngSeed) -> Self {
        Self { seed, ..self }
    }

    pub fn without_noise(self) -> Self {
        Self {
            noise_sigma: 0.0,
            ..self
        }
    }

    /// Checks `0 < δ < (hi − lo)/2` and `σ ≥ 0` for the given activation.
    pub fn validate(&self, kind: ActivationKind) -> Result<()> {
        let (lo, hi) = kind.range();
        let half_width = (hi - lo) / 2.0;
        if !(self.clamp_margin > 0.0 && self.clamp_margin < half_width) {
            return Err(Error::InvalidSpec(format!(
                "clamp margin {} must lie in (0, {half_width}) for {}",
                self.clamp_margin,
                kind.name()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Applies the activation to every entry.
pub fn apply(kind: ActivationKind, m: &Matrix) -> Matrix {
    m.map(|v| kind.apply_value(v))
}

/// Guarded inverse: noise, then clamp, then the closed-form inverse.
pub fn invert(kind: ActivationKind, m: &Matrix, guard: &InversionGuard) -> Matrix {
    let margin = guard.clamp_margin;
    if guard.noise_sigma > 0.0 {
        let mut noise = GaussianStream::new(guard.seed);
        let sigma = guard.noise_sigma;
        m.map(|v| {
            let noisy = v + sigma * noise.sample();
            kind.inverse_value(kind.clamp_value(noisy, margin))
        })
    } else {
        m.map(|v| kind.inverse_value(kind.clamp_value(v, margin)))
    }
}

/// Guarded inverse of a single value without noise.
pub fn invert_value(kind: ActivationKind, x: f64, margin: f64) -> f64 {
    kind.inverse_value(kind.clamp_value(x, margin))
}
