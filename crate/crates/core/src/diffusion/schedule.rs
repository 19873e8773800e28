use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::state::StateVector;

/// Noise level at one diffusion time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub tau: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Variance-preserving schedule with a linear β on `τ ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_steps: usize,
    pub tau_grid: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn build_schedule(beta_min: f64, beta_max: f64, n_steps: usize) -> Result<NoiseSchedule> {
    if !(beta_min > 0.0 && beta_min.is_finite() && beta_max.is_finite()) || beta_max < beta_min {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_min ≤ beta_max, got {beta_min} and {beta_max}"
        )));
    }
    if n_steps < 2 {
        return Err(Error::InvalidParameter("schedule needs at least 2 steps".into()));
    }
    let mut s = NoiseSchedule {
        beta_min,
        beta_max,
        n_steps,
        tau_grid: Vec::with_capacity(n_steps + 1),
        alpha: Vec::with_capacity(n_steps + 1),
        sigma: Vec::with_capacity(n_steps + 1),
    };
    for i in 0..=n_steps {
        let tau = i as f64 / n_steps as f64;
        let lvl = s.level_at(tau);
        s.tau_grid.push(tau);
        s.alpha.push(lvl.alpha);
        s.sigma.push(lvl.sigma);
    }
    Ok(s)
}

impl NoiseSchedule {
    pub fn beta(&self, tau: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * tau
    }

    /// `∫₀^τ β(s) ds`.
    pub fn integrated_beta(&self, tau: f64) -> f64 {
        self.beta_min * tau + 0.5 * (self.beta_max - self.beta_min) * tau * tau
    }

    /// Level at an arbitrary `τ`; agrees with the grid at the nodes.
    pub fn level_at(&self, tau: f64) -> NoiseLevel {
        let b = self.integrated_beta(tau);
        NoiseLevel {
            tau,
            alpha: (-0.5 * b).exp(),
            sigma: (-(-b).exp_m1()).sqrt(),
        }
    }

    pub fn level(&self, idx: usize) -> NoiseLevel {
        NoiseLevel {
            tau: self.tau_grid[idx],
            alpha: self.alpha[idx],
            sigma: self.sigma[idx],
        }
    }

    pub fn check_index(&self, idx: usize) -> Result<()> {
        if idx > self.n_steps {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: self.n_steps + 1,
            });
        }
        Ok(())
    }
}

/// Draws `x_τ = α x0 + σ ε` and returns it with the noise `ε`.
pub fn perturb_forward(x0: &StateVector, tau_idx: usize, sched: &NoiseSchedule, seed: u64) -> Result<(StateVector, StateVector)> {
    sched.check_index(tau_idx)?;
    let mut r = rng::stream(seed, "perturb-forward", &[tau_idx as u64]);
    let eps = rng::normal_vector(&mut r, x0.dim());
    let lvl = sched.level(tau_idx);
    let x = x0.values() * lvl.alpha + &eps * lvl.sigma;
    Ok((StateVector::from_dvector(x)?, StateVector::from_dvector(eps)?))
}
