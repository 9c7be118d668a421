//! Variance-exploding noise schedule.
//!
//! The noise level follows `sigma(t) = sigma_min * (sigma_max / sigma_min)^t`
//! for `t` in `[0, 1]`. The discrete ladder samples it at `t_i = (i-1)/(N-1)`
//! so both endpoints are realized, and the reverse-diffusion coefficients are
//! `g_i = sqrt(sigma_i^2 - sigma_{i-1}^2)` with `sigma_0 = 0` and zero drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    num_steps: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, num_steps: usize) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite()) {
            return Err(Error::Validation("noise levels must be finite".into()));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max) {
            return Err(Error::Validation(format!(
                "need 0 < sigma_min < sigma_max, got sigma_min={sigma_min}, sigma_max={sigma_max}"
            )));
        }
        if num_steps < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 noise levels, got {num_steps}"
            )));
        }
        Ok(NoiseSchedule {
            sigma_min,
            sigma_max,
            num_steps,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Continuous noise level at time `t`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} is outside [0, 1]")));
        }
        // Pin the endpoints; the general formula can be off by one ulp at t = 1.
        Ok(if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
        })
    }

    /// The geometric ladder `sigma_1 < ... < sigma_N`.
    pub fn discrete_sigmas(&self) -> Vec<f64> {
        let last = (self.num_steps - 1) as f64;
        (0..self.num_steps)
            .map(|i| {
                let t = if i + 1 == self.num_steps {
                    1.0
                } else {
                    i as f64 / last
                };
                self.sigma_at(t).expect("ladder times lie in [0, 1]")
            })
            .collect()
    }

    pub fn diffusion_coefficients(&self) -> DiscretizationCoefficients {
        let mut ladder = Vec::with_capacity(self.num_steps + 1);
        ladder.push(0.0);
        ladder.extend(self.discrete_sigmas());
        DiscretizationCoefficients::from_ladder(&ladder)
            .expect("a validated schedule yields an increasing ladder")
    }

    /// One-shot forward kernel `x_t = x0 + sigma(t) * z`.
    pub fn perturb(&self, x0: &Grid, t: f64, z: &Grid) -> Result<PerturbationSample> {
        x0.check_shape(z, "perturb: clean sample and noise")?;
        let sigma = self.sigma_at(t)?;
        let x_t = x0.add_scaled(z, sigma)?;
        Ok(PerturbationSample {
            x0: x0.clone(),
            t,
            z: z.clone(),
            x_t,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample {
    pub x0: Grid,
    pub t: f64,
    pub z: Grid,
    pub x_t: Grid,
}

/// Reverse-diffusion coefficients for a ladder `sigma_0 <= sigma_1 <= ... <= sigma_N`.
///
/// The drift is identically zero, so only `g_i` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationCoefficients {
    ladder: Vec<f64>,
    g: Vec<f64>,
}

impl DiscretizationCoefficients {
    /// Builds coefficients from a full ladder whose first entry is `sigma_0`.
    pub fn from_ladder(ladder: &[f64]) -> Result<Self> {
        if ladder.len() < 2 {
            return Err(Error::Validation(
                "ladder needs sigma_0 and at least one level".into(),
            ));
        }
        if ladder.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Validation(
                "ladder entries must be finite and nonnegative".into(),
            ));
        }
        if let Some(w) = ladder.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::Validation(format!(
                "ladder must be nondecreasing, found {} after {}",
                w[1], w[0]
            )));
        }
        let g = ladder
            .windows(2)
            .map(|w| (w[1] * w[1] - w[0] * w[0]).sqrt())
            .collect();
        Ok(DiscretizationCoefficients {
            ladder: ladder.to_vec(),
            g,
        })
    }

    /// Number of levels `N` (excluding `sigma_0`).
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// `g_i` for `i` in `1..=N`.
    pub fn g(&self, i: usize) -> f64 {
        self.g[i - 1]
    }

    pub fn g_all(&self) -> &[f64] {
        &self.g
    }

    /// `sigma_i` for `i` in `0..=N`.
    pub fn sigma(&self, i: usize) -> f64 {
        self.ladder[i]
    }

    /// Drift `f_i`; zero for the variance-exploding process.
    pub fn drift(&self, _i: usize) -> f64 {
        0.0
    }
}
