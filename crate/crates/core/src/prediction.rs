//! Ensemble forecasts, forcing-constrained seasonal runs and long climate runs.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::assimilation::{gap_step, GapContext};
use crate::conditioning::{forcing_constraint, sdedit_state, ObservationSet, SDEditConfig};
use crate::dynamics::{forecast, SystemSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::state::{Climatology, Ensemble, StateVector, Trajectory};

/// External forcing imposed on the forcing coordinates during prediction.
#[derive(Clone, Copy, Debug)]
pub enum Forcing<'a> {
    None,
    /// Lead-indexed forcing-coordinate states (state `k` applies at lead `k`).
    Prescribed(&'a Trajectory),
    /// The system's seasonal cycle shifted by a constant.
    ShiftedSeasonal { spec: &'a SystemSpec, shift: f64 },
}

impl Forcing<'_> {
    /// Constraint for lead `lead` at global step `step`.
    pub fn at(&self, lead: usize, step: u64) -> Result<Option<ObservationSet>> {
        match self {
            Forcing::None => Ok(None),
            Forcing::Prescribed(traj) => forcing_constraint(traj, lead).map(Some),
            Forcing::ShiftedSeasonal { spec, shift } => {
                let theta: Vec<f64> = spec.seasonal_forcing(step as f64).iter().map(|v| v + shift).collect();
                let k = theta.len();
                ObservationSet::new((0..k).collect(), theta, vec![0.0; k], step).map(Some)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRun {
    pub init_ensemble: Ensemble,
    pub lead_steps: usize,
    pub per_lead_ensembles: Vec<Ensemble>,
    pub tau_star_idx: usize,
    pub start_step: u64,
    pub resampled_members: usize,
}

/// Rolls the ensemble forward `lead_steps` GAP steps from global step `start_step`.
pub fn ensemble_forecast(
    ctx: &GapContext<'_>,
    init: &Ensemble,
    tau_star_idx: usize,
    lead_steps: usize,
    forcing: Forcing<'_>,
    start_step: u64,
    seed: u64,
) -> Result<ForecastRun> {
    if lead_steps == 0 {
        return Err(Error::InvalidParameter("lead_steps must be at least 1".into()));
    }
    let mut ens = init.clone();
    let mut per_lead = Vec::with_capacity(lead_steps);
    let mut resampled = 0;
    for lead in 1..=lead_steps {
        let step = start_step + lead as u64 - 1;
        let obs = forcing.at(lead, step + 1)?;
        let out = gap_step(ctx, &ens, tau_star_idx, obs.as_ref(), step, seed)?;
        resampled += out.resampled;
        ens = out.posterior;
        per_lead.push(ens.clone());
    }
    Ok(ForecastRun {
        init_ensemble: init.clone(),
        lead_steps,
        per_lead_ensembles: per_lead,
        tau_star_idx,
        start_step,
        resampled_members: resampled,
    })
}

/// Ensemble forecast with predicted forcing inpainted at every lead.
pub fn seasonal_run(
    ctx: &GapContext<'_>,
    init: &Ensemble,
    forcing_pred: &Trajectory,
    tau_star_idx: usize,
    lead_steps: usize,
    start_step: u64,
    seed: u64,
) -> Result<ForecastRun> {
    if forcing_pred.len() < lead_steps + 1 {
        return Err(Error::TooFewSamples {
            needed: lead_steps + 1,
            found: forcing_pred.len(),
        });
    }
    ensemble_forecast(ctx, init, tau_star_idx, lead_steps, Forcing::Prescribed(forcing_pred), start_step, seed)
}

/// Reference statistics of the scalar "global mean" over `coords`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateReference {
    pub coords: Vec<usize>,
    pub global_mean: f64,
    pub global_std: f64,
}

impl ClimateReference {
    pub fn from_trajectory(data: &Trajectory, coords: Vec<usize>) -> Result<Self> {
        if data.len() < 2 || coords.is_empty() {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: data.len(),
            });
        }
        let g: Vec<f64> = data.states().iter().map(|s| global_mean(s.values(), &coords)).collect();
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            coords,
            global_mean: mean,
            global_std: var.sqrt().max(crate::state::STD_FLOOR),
        })
    }
}

pub fn global_mean(x: &DVector<f64>, coords: &[usize]) -> f64 {
    coords.iter().map(|&i| x[i]).sum::<f64>() / coords.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateRunConfig {
    pub tau_star_idx: usize,
    pub n_steps: u64,
    /// SDEdit is applied after every `cadence`-th model step.
    pub cadence: u64,
    /// Keep every `thin`-th state in the returned trajectory (0 keeps none).
    pub thin: u64,
    /// Steps excluded from the running-mean deviation check.
    pub burn_in: u64,
    /// Record the running global mean every `trace_every` steps (0 disables).
    pub trace_every: u64,
}

impl Default for ClimateRunConfig {
    fn default() -> Self {
        Self {
            tau_star_idx: 10,
            n_steps: 10_000,
            cadence: 1,
            thin: 0,
            burn_in: 1_000,
            trace_every: 1_000,
        }
    }
}

/// Streaming statistics of a free run; memory is independent of run length
/// apart from the optional trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateRunStats {
    pub count: u64,
    pub running_mean: DVector<f64>,
    m2: DVector<f64>,
    pub seasonal_sum: Vec<DVector<f64>>,
    pub seasonal_count: Vec<u64>,
    pub excursion_log: Vec<(u64, f64)>,
    pub global_sum: f64,
    pub max_running_mean_deviation: f64,
    pub global_mean_trace: Vec<(u64, f64)>,
    pub nonfinite_events: u64,
}

pub const EXCURSION_Z: f64 = 5.0;

impl ClimateRunStats {
    pub fn new(dim: usize, cycle_len: Option<usize>) -> Self {
        let phases = cycle_len.unwrap_or(0);
        Self {
            count: 0,
            running_mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
            seasonal_sum: vec![DVector::zeros(dim); phases],
            seasonal_count: vec![0; phases],
            excursion_log: Vec::new(),
            global_sum: 0.0,
            max_running_mean_deviation: 0.0,
            global_mean_trace: Vec::new(),
            nonfinite_events: 0,
        }
    }

    pub fn running_var(&self) -> DVector<f64> {
        if self.count == 0 {
            return self.m2.clone();
        }
        &self.m2 / self.count as f64
    }

    pub fn seasonal_composite(&self) -> Vec<Option<DVector<f64>>> {
        self.seasonal_sum
            .iter()
            .zip(&self.seasonal_count)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    /// Running mean of the global mean over the reference coordinates.
    pub fn running_global_mean(&self) -> f64 {
        self.global_sum / self.count.max(1) as f64
    }

    fn push(&mut self, x: &DVector<f64>, step: u64, clim: &Climatology, reference: &ClimateReference) {
        self.count += 1;
        let n = self.count as f64;
        let delta = x - &self.running_mean;
        self.running_mean += &delta / n;
        let delta2 = x - &self.running_mean;
        self.m2 += delta.component_mul(&delta2);
        if !self.seasonal_count.is_empty() {
            let p = (step % self.seasonal_count.len() as u64) as usize;
            self.seasonal_sum[p] += x;
            self.seasonal_count[p] += 1;
        }
        let z = (0..x.len())
            .map(|i| ((x[i] - clim.mean[i]) / clim.std[i]).abs())
            .fold(0.0, f64::max);
        if z > EXCURSION_Z {
            self.excursion_log.push((step, z));
        }
        self.global_sum += global_mean(x, &reference.coords);
    }

    /// Combines statistics of independent runs (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &ClimateRunStats) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.running_mean - &self.running_mean;
        self.running_mean += &delta * (nb / n);
        self.m2 += &other.m2 + delta.component_mul(&delta) * (na * nb / n);
        self.count += other.count;
        for (a, b) in self.seasonal_sum.iter_mut().zip(&other.seasonal_sum) {
            *a += b;
        }
        for (a, b) in self.seasonal_count.iter_mut().zip(&other.seasonal_count) {
            *a += b;
        }
        self.excursion_log.extend_from_slice(&other.excursion_log);
        self.global_sum += other.global_sum;
        self.max_running_mean_deviation = self.max_running_mean_deviation.max(other.max_running_mean_deviation);
        self.nonfinite_events += other.nonfinite_events;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateRunOutput {
    pub stats: ClimateRunStats,
    pub trajectory: Option<Trajectory>,
    pub final_state: Option<StateVector>,
}

fn enforce(x: &mut DVector<f64>, obs: &ObservationSet) {
    for (j, &i) in obs.indices.iter().enumerate() {
        x[i] = obs.values[j];
    }
}

/// Single-member free run with streaming statistics. `clim` supplies the
/// excursion z-scores and (if it has a phase table) the seasonal composite.
#[allow(clippy::too_many_arguments)]
pub fn climate_run(
    ctx: &GapContext<'_>,
    init: &StateVector,
    cfg: &ClimateRunConfig,
    forcing: Forcing<'_>,
    clim: &Climatology,
    reference: &ClimateReference,
    start_step: u64,
    seed: u64,
) -> Result<ClimateRunOutput> {
    if cfg.cadence == 0 {
        return Err(Error::InvalidParameter("cadence must be at least 1".into()));
    }
    ctx.sched.check_index(cfg.tau_star_idx)?;
    let mut stats = ClimateRunStats::new(init.dim(), clim.cycle_len());
    let mut traj = (cfg.thin > 0).then(|| Trajectory::empty(init.dim(), 1.0));
    if cfg.n_steps == 0 {
        return Ok(ClimateRunOutput {
            stats,
            trajectory: traj,
            final_state: None,
        });
    }
    let sd = SDEditConfig {
        tau_star_idx: cfg.tau_star_idx,
        combine_obs: None,
    };
    let mut x = init.clone();
    for k in 0..cfg.n_steps {
        let step = start_step + k;
        let seed_k = rng::derive(seed, "climate-step", &[k]);
        let y = match forecast(&x, ctx.forecaster, step, 1, seed_k) {
            Ok(y) => y,
            Err(e @ Error::Divergence { .. }) => {
                stats.nonfinite_events += 1;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let obs = forcing.at(k as usize + 1, step + 1)?;
        x = if (k + 1) % cfg.cadence == 0 {
            let cfg_k = SDEditConfig {
                combine_obs: obs,
                ..sd.clone()
            };
            let ens = sdedit_state(&y, ctx.model, ctx.sched, ctx.sampler, &cfg_k, ctx.guidance, 1, seed_k)?;
            ens.members()[0].clone()
        } else if let Some(o) = obs {
            let mut v = y.into_inner();
            enforce(&mut v, &o);
            StateVector::from_dvector(v)?
        } else {
            y
        };
        stats.push(x.values(), step + 1, clim, reference);
        if k + 1 > cfg.burn_in {
            let dev = (stats.running_global_mean() - reference.global_mean).abs();
            stats.max_running_mean_deviation = stats.max_running_mean_deviation.max(dev);
        }
        if cfg.trace_every > 0 && (k + 1) % cfg.trace_every == 0 {
            stats.global_mean_trace.push((k + 1, stats.running_global_mean()));
        }
        if let Some(t) = traj.as_mut() {
            if (k + 1) % cfg.thin == 0 {
                t.push(x.clone())?;
            }
        }
    }
    Ok(ClimateRunOutput {
        stats,
        trajectory: traj,
        final_state: Some(x),
    })
}
