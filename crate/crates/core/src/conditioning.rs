//! Observation operators and sampling-time constraints: inpainting, time
//! travel, co-paint likelihood guidance, SDEdit and noise-level calibration.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    node_indices, reverse_process, sample_guided, Guidance, NoiseLevel, NoiseSchedule, SamplerConfig, ScoreModel,
};
use crate::dynamics::{forecast, ForecastModel};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::state::{Climatology, Ensemble, StateVector, Trajectory};
use crate::verification::{crps, power_spectrum, spectrum_distance};

/// Floor on the diagonal of the innovation covariance.
pub const INNOVATION_FLOOR: f64 = 1e-8;

/// Direct observations of a subset of coordinates with independent errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub indices: Vec<usize>,
    pub values: DVector<f64>,
    pub sigma_o: DVector<f64>,
    pub time_index: u64,
}

impl ObservationSet {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, sigma_o: Vec<f64>, time_index: u64) -> Result<Self> {
        if values.len() != indices.len() || sigma_o.len() != indices.len() {
            return Err(Error::DimMismatch {
                expected: indices.len(),
                found: values.len().max(sigma_o.len()),
            });
        }
        let unique: BTreeSet<_> = indices.iter().collect();
        if unique.len() != indices.len() {
            return Err(Error::InvalidParameter("observation indices must be unique".into()));
        }
        if sigma_o.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observation values and errors must be finite, errors ≥ 0".into()));
        }
        Ok(Self {
            indices,
            values: DVector::from_vec(values),
            sigma_o: DVector::from_vec(sigma_o),
            time_index,
        })
    }

    pub fn empty(time_index: u64) -> Self {
        Self {
            indices: Vec::new(),
            values: DVector::zeros(0),
            sigma_o: DVector::zeros(0),
            time_index,
        }
    }

    /// Observation pattern with zero values, to be filled by [`apply_observation_noise`].
    pub fn template(indices: Vec<usize>, sigma_o: Vec<f64>) -> Result<Self> {
        let n = indices.len();
        Self::new(indices, vec![0.0; n], sigma_o, 0)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= dim) {
            Some(&i) => Err(Error::IndexOutOfRange { index: i, len: dim }),
            None => Ok(()),
        }
    }

    /// Union of two sets; entries of `other` win on shared coordinates.
    pub fn merge(&self, other: &ObservationSet) -> ObservationSet {
        let mut out = other.clone();
        for (k, &i) in self.indices.iter().enumerate() {
            if !other.indices.contains(&i) {
                out.indices.push(i);
                out.values = out.values.push(self.values[k]);
                out.sigma_o = out.sigma_o.push(self.sigma_o[k]);
            }
        }
        out
    }
}

/// Draws `Ω(x) + N(0, diag σ_o²)` for the pattern in `template`.
pub fn apply_observation_noise(x_truth: &StateVector, template: &ObservationSet, seed: u64) -> Result<ObservationSet> {
    template.check_dim(x_truth.dim())?;
    let mut r = rng::stream(seed, "observation-noise", &[template.time_index]);
    let values = template
        .indices
        .iter()
        .zip(template.sigma_o.iter())
        .map(|(&i, &s)| {
            let z = rng::normal(&mut r);
            if s > 0.0 {
                x_truth.get(i) + s * z
            } else {
                x_truth.get(i)
            }
        })
        .collect();
    ObservationSet::new(template.indices.clone(), values, template.sigma_o.iter().copied().collect(), template.time_index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Overwrite observed coordinates with noisified observations.
    Replace,
    /// Add the observational likelihood gradient to the score.
    Copaint,
    /// Replacement plus periodic rewind-and-redo rounds.
    ReplacePlusTravel,
    /// Gradient ascent on the state toward the observations before each step.
    CopaintMap,
}

/// Approximation of the denoiser Jacobian `∂F_τ/∂x` in the likelihood gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Vector-Jacobian product through the score model.
    Exact,
    /// `(1/α) I`.
    InverseAlpha,
}

/// Form of the one-step approximation covariance `Σ_τ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaTauMode {
    /// `scale · σ(τ)² I`.
    Scaled,
    /// `scale · Cov[x₀ | x_τ]` from the model (Tweedie second moment).
    Tweedie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub sigma_tau_scale: f64,
    pub sigma_tau_mode: SigmaTauMode,
    pub jacobian: JacobianMode,
    /// Rewind depth in denoising nodes.
    pub travel_tau: usize,
    /// Rewind rounds `K`.
    pub travel_rounds: usize,
    /// Rewinds happen after every `travel_every`-th node.
    pub travel_every: usize,
    pub guidance_lr: f64,
    /// Gradient-ascent iterations per node in `copaint_map` mode.
    pub map_iters: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Copaint,
            sigma_tau_scale: 1.0,
            sigma_tau_mode: SigmaTauMode::Tweedie,
            jacobian: JacobianMode::Exact,
            travel_tau: 10,
            travel_rounds: 2,
            travel_every: 10,
            guidance_lr: 1.0,
            map_iters: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_tau_scale >= 0.0 && self.sigma_tau_scale.is_finite()) {
            return Err(Error::InvalidParameter("sigma_tau_scale must be ≥ 0".into()));
        }
        if !(self.guidance_lr >= 0.0 && self.guidance_lr.is_finite()) {
            return Err(Error::InvalidParameter("guidance_lr must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Observations expressed in model (normalized) coordinates.
#[derive(Clone, Debug)]
struct NormalizedObs {
    idx: Vec<usize>,
    values: DVector<f64>,
    var: DVector<f64>,
    hard: Vec<bool>,
}

impl NormalizedObs {
    fn new(obs: &ObservationSet, clim: &Climatology) -> Self {
        let k = obs.len();
        let values = DVector::from_fn(k, |j, _| {
            let i = obs.indices[j];
            (obs.values[j] - clim.mean[i]) / clim.std[i]
        });
        let var = DVector::from_fn(k, |j, _| (obs.sigma_o[j] / clim.std[obs.indices[j]]).powi(2));
        Self {
            idx: obs.indices.clone(),
            values,
            var,
            hard: obs.sigma_o.iter().map(|&s| s == 0.0).collect(),
        }
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let sel: Vec<usize> = (0..self.idx.len()).filter(|&j| keep(j)).collect();
        Self {
            idx: sel.iter().map(|&j| self.idx[j]).collect(),
            values: DVector::from_fn(sel.len(), |r, _| self.values[sel[r]]),
            var: DVector::from_fn(sel.len(), |r, _| self.var[sel[r]]),
            hard: sel.iter().map(|&j| self.hard[j]).collect(),
        }
    }
}

fn likelihood_grad_level(
    x: &DVector<f64>,
    lvl: &NoiseLevel,
    obs: &NormalizedObs,
    model: &ScoreModel,
    cfg: &GuidanceConfig,
) -> Result<DVector<f64>> {
    let d = x.len();
    let k = obs.idx.len();
    if k == 0 {
        return Ok(DVector::zeros(d));
    }
    let f = model.denoise_level(x, lvl);
    let innov = DVector::from_fn(k, |j, _| obs.values[j] - f[obs.idx[j]]);
    let mut c = match cfg.sigma_tau_mode {
        SigmaTauMode::Scaled => DMatrix::from_diagonal_element(k, k, cfg.sigma_tau_scale * lvl.sigma * lvl.sigma),
        SigmaTauMode::Tweedie => model.posterior_cov_block(x, lvl, &obs.idx) * cfg.sigma_tau_scale,
    };
    for j in 0..k {
        c[(j, j)] = (c[(j, j)] + obs.var[j]).max(INNOVATION_FLOOR);
    }
    let w = c
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance"))?
        .solve(&innov);
    let mut v = DVector::zeros(d);
    for j in 0..k {
        v[obs.idx[j]] = w[j];
    }
    Ok(match cfg.jacobian {
        JacobianMode::Exact => model.denoise_vjp(x, lvl, &v),
        JacobianMode::InverseAlpha => v / lvl.alpha.max(crate::diffusion::ALPHA_FLOOR),
    })
}

/// Observational log-likelihood gradient
/// `Jᵀ Ωᵀ (Σ_o + Ω Σ_τ Ωᵀ)⁻¹ (O − Ω F_τ(x_τ))` at grid node `tau_idx`.
/// `x_tau` is in model coordinates; `obs` in system units.
pub fn likelihood_gradient(
    x_tau: &StateVector,
    tau_idx: usize,
    obs: &ObservationSet,
    model: &ScoreModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<StateVector> {
    sched.check_index(tau_idx)?;
    Error::check_dim(model.dim, x_tau.dim())?;
    obs.check_dim(model.dim)?;
    let nobs = NormalizedObs::new(obs, &model.normalizer);
    let g = likelihood_grad_level(x_tau.values(), &sched.level(tau_idx), &nobs, model, cfg)?;
    StateVector::from_dvector(g)
}

/// Guidance hooks for one observation set.
struct ObservationGuide<'a> {
    model: &'a ScoreModel,
    cfg: &'a GuidanceConfig,
    soft: NormalizedObs,
    hard: NormalizedObs,
}

impl<'a> ObservationGuide<'a> {
    fn new(model: &'a ScoreModel, obs: &ObservationSet, cfg: &'a GuidanceConfig) -> Self {
        let all = NormalizedObs::new(obs, &model.normalizer);
        let replace = matches!(cfg.mode, GuidanceMode::Replace | GuidanceMode::ReplacePlusTravel);
        // σ_o = 0 observations are always enforced by replacement.
        let soft = all.subset(|j| !replace && !all.hard[j]);
        let hard = all.subset(|j| replace || all.hard[j]);
        Self { model, cfg, soft, hard }
    }

    fn gradient(&self, x: &DVector<f64>, lvl: &NoiseLevel) -> DVector<f64> {
        // The floor keeps the innovation covariance positive definite, so
        // factorization cannot fail; fall back to no guidance defensively.
        likelihood_grad_level(x, lvl, &self.soft, self.model, self.cfg).unwrap_or_else(|_| DVector::zeros(x.len()))
    }
}

impl Guidance for ObservationGuide<'_> {
    fn score_correction(&self, x: &DVector<f64>, lvl: &NoiseLevel) -> Option<DVector<f64>> {
        if self.cfg.mode != GuidanceMode::Copaint || self.soft.idx.is_empty() {
            return None;
        }
        Some(self.gradient(x, lvl) * self.cfg.guidance_lr)
    }

    fn before_step(&self, x: &mut DVector<f64>, lvl: &NoiseLevel) {
        if self.cfg.mode != GuidanceMode::CopaintMap || self.soft.idx.is_empty() {
            return;
        }
        for _ in 0..self.cfg.map_iters {
            let g = self.gradient(x, lvl);
            *x += g * (self.cfg.guidance_lr * lvl.sigma * lvl.sigma);
        }
    }

    fn after_step(&self, x: &mut DVector<f64>, lvl: &NoiseLevel, rng: &mut StreamRng) {
        for (j, &i) in self.hard.idx.iter().enumerate() {
            x[i] = if lvl.sigma > 0.0 {
                lvl.alpha * self.hard.values[j] + lvl.sigma * rng::normal(rng)
            } else {
                self.hard.values[j]
            };
        }
    }

    fn travel(&self) -> Option<(usize, usize, usize)> {
        (self.cfg.mode == GuidanceMode::ReplacePlusTravel).then_some((
            self.cfg.travel_every,
            self.cfg.travel_tau,
            self.cfg.travel_rounds,
        ))
    }
}

/// Sets coordinates observed without error to their observed values.
fn enforce_hard(x: &mut DVector<f64>, obs: &ObservationSet) {
    for (j, &i) in obs.indices.iter().enumerate() {
        if obs.sigma_o[j] == 0.0 {
            x[i] = obs.values[j];
        }
    }
}

fn finish(model: &ScoreModel, z: &DVector<f64>, obs: Option<&ObservationSet>) -> Result<StateVector> {
    let mut x = model.normalizer.denormalize_vec(z);
    if let Some(o) = obs {
        enforce_hard(&mut x, o);
    }
    StateVector::from_dvector(x)
}

/// Observation-conditioned ensemble from the model prior (system units).
pub fn sample_conditioned(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    obs: &ObservationSet,
    g: &GuidanceConfig,
    n: usize,
    seed: u64,
) -> Result<Ensemble> {
    g.validate()?;
    obs.check_dim(model.dim)?;
    let guide = ObservationGuide::new(model, obs, g);
    let ens = sample_guided(model, sched, sampler_cfg, &guide, n, seed, "sample-conditioned")?;
    let members = ens
        .members()
        .iter()
        .map(|m| {
            let mut x = m.values().clone();
            enforce_hard(&mut x, obs);
            StateVector::from_dvector(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, ens.member_seeds().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SDEditConfig {
    pub tau_star_idx: usize,
    pub combine_obs: Option<ObservationSet>,
}

/// Partially noises each input member to `τ*` and denoises back, optionally
/// steering the reverse pass with `combine_obs`. Produces `replicates`
/// outputs per input member (member-major order).
#[allow(clippy::too_many_arguments)]
pub fn sdedit(
    x_pred: &Ensemble,
    model: &ScoreModel,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    cfg: &SDEditConfig,
    guidance: &GuidanceConfig,
    replicates: usize,
    seed: u64,
) -> Result<Ensemble> {
    sched.check_index(cfg.tau_star_idx)?;
    sampler_cfg.validate(sched)?;
    guidance.validate()?;
    model.validate()?;
    Error::check_dim(model.dim, x_pred.dim())?;
    if replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be at least 1".into()));
    }
    let empty = ObservationSet::empty(0);
    let obs = cfg.combine_obs.as_ref().unwrap_or(&empty);
    obs.check_dim(model.dim)?;
    let guide = ObservationGuide::new(model, obs, guidance);
    let nodes = node_indices(sched, sampler_cfg.n_steps, cfg.tau_star_idx);
    let lvl = sched.level(cfg.tau_star_idx);
    let total = x_pred.size() * replicates;
    let out: Result<Vec<StateVector>> = (0..total)
        .into_par_iter()
        .map(|k| {
            let member = &x_pred.members()[k / replicates];
            let mut r = rng::stream(seed, "sdedit", &[k as u64]);
            let z = model.normalizer.normalize_vec(member.values());
            let z_final = if cfg.tau_star_idx == 0 {
                z
            } else {
                let eps = rng::normal_vector(&mut r, model.dim);
                let start = z * lvl.alpha + eps * lvl.sigma;
                reverse_process(model, sched, sampler_cfg, &guide, start, &nodes, &mut r)?
            };
            finish(model, &z_final, cfg.combine_obs.as_ref())
        })
        .collect();
    let seeds = (0..total as u64).map(|k| rng::derive(seed, "sdedit", &[k])).collect();
    Ensemble::new(out?, seeds)
}

/// SDEdit of a single state.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_state(
    x_pred: &StateVector,
    model: &ScoreModel,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    cfg: &SDEditConfig,
    guidance: &GuidanceConfig,
    replicates: usize,
    seed: u64,
) -> Result<Ensemble> {
    let ens = Ensemble::new(vec![x_pred.clone()], vec![seed])?;
    sdedit(&ens, model, sched, sampler_cfg, cfg, guidance, replicates, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub candidates: Vec<usize>,
    pub n_ens: usize,
    /// Number of validation forecast cases.
    pub n_cases: usize,
    /// Forecaster steps between consecutive validation snapshots.
    pub lead_steps: usize,
    /// Global step index of the first validation snapshot.
    pub start_step: u64,
    pub seed: u64,
}

/// Scores of one candidate noise level over the validation cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub tau_star_idx: usize,
    /// Mean CRPS in units of climatological std.
    pub crps: f64,
    /// Mean absolute error of the ensemble mean, in units of climatological std.
    pub normalized_mae: f64,
    /// Mean absolute log-ratio of member spectra to the truth spectrum.
    pub spectrum_distance: f64,
}

pub const MIN_CALIBRATION_CASES: usize = 50;

/// Selects `τ*` minimizing mean CRPS of SDEdit-corrected one-step forecasts
/// on validation data; ties go to the smaller `τ*`.
pub fn calibrate_tau_star(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    guidance: &GuidanceConfig,
    forecaster: &ForecastModel,
    val_data: &Trajectory,
    cfg: &CalibrationConfig,
) -> Result<(usize, Vec<TauReport>)> {
    if cfg.candidates.is_empty() {
        return Err(Error::Empty("candidate noise levels"));
    }
    for &c in &cfg.candidates {
        sched.check_index(c)?;
    }
    let available = val_data.len().saturating_sub(1);
    if available < MIN_CALIBRATION_CASES || cfg.n_cases < MIN_CALIBRATION_CASES {
        return Err(Error::InsufficientCases {
            needed: MIN_CALIBRATION_CASES,
            found: available.min(cfg.n_cases),
        });
    }
    let n_cases = cfg.n_cases.min(available);
    let stride = available / n_cases;
    let cases: Vec<usize> = (0..n_cases).map(|c| c * stride).collect();
    let clim = &model.normalizer;
    let d = model.dim;

    let forecasts: Vec<StateVector> = cases
        .iter()
        .map(|&t| {
            let step = cfg.start_step + (t * cfg.lead_steps) as u64;
            let seed = rng::derive(cfg.seed, "calibration-forecast", &[t as u64]);
            forecast(&val_data.states()[t], forecaster, step, cfg.lead_steps, seed)
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(cfg.candidates.len());
    for &tau in &cfg.candidates {
        let sd = SDEditConfig {
            tau_star_idx: tau,
            combine_obs: None,
        };
        let mut crps_sum = 0.0;
        let mut mae_sum = 0.0;
        let mut spec_sum = 0.0;
        for (c, &t) in cases.iter().enumerate() {
            let truth = &val_data.states()[t + 1];
            let ens = sdedit_state(
                &forecasts[c],
                model,
                sched,
                sampler_cfg,
                &sd,
                guidance,
                cfg.n_ens,
                rng::derive(cfg.seed, "calibration-sdedit", &[tau as u64, c as u64]),
            )?;
            let mean = ens.mean();
            for i in 0..d {
                let s = clim.std[i];
                let vals: Vec<f64> = ens.coordinate(i).iter().map(|v| v / s).collect();
                crps_sum += crps(&vals, truth.get(i) / s)? / d as f64;
                mae_sum += (mean[i] - truth.get(i)).abs() / s / d as f64;
            }
            let ts = power_spectrum(truth.as_slice(), d as f64)?;
            let mut dist = 0.0;
            for m in ens.members() {
                dist += spectrum_distance(&power_spectrum(m.as_slice(), d as f64)?, &ts);
            }
            spec_sum += dist / ens.size() as f64;
        }
        let nc = n_cases as f64;
        reports.push(TauReport {
            tau_star_idx: tau,
            crps: crps_sum / nc,
            normalized_mae: mae_sum / nc,
            spectrum_distance: spec_sum / nc,
        });
    }
    let mut best = 0;
    for (k, r) in reports.iter().enumerate() {
        let b = &reports[best];
        if r.crps < b.crps || (r.crps == b.crps && r.tau_star_idx < b.tau_star_idx) {
            best = k;
        }
    }
    Ok((reports[best].tau_star_idx, reports))
}

/// Hard constraint on the forcing coordinates `[0, dim θ)` at lead `t`.
pub fn forcing_constraint(theta_traj: &Trajectory, t: usize) -> Result<ObservationSet> {
    let theta = theta_traj.get(t).ok_or(Error::IndexOutOfRange {
        index: t,
        len: theta_traj.len(),
    })?;
    let k = theta.dim();
    ObservationSet::new((0..k).collect(), theta.as_slice().to_vec(), vec![0.0; k], t as u64)
}

/// Persists the initial forcing anomaly on top of the seasonal cycle:
/// state `k` of the result is `clim_phase(t0 + k) + (θ(t0) − clim_phase(t0))`
/// for leads `k = 0..=horizon`, restricted to the forcing coordinates.
pub fn anomaly_persistence(theta_t0: &StateVector, clim: &Climatology, t0_phase: usize, horizon: usize) -> Result<Trajectory> {
    let cycle = clim.cycle_len().ok_or(Error::MissingPhaseTable)?;
    let k = theta_t0.dim();
    if k > clim.dim() {
        return Err(Error::DimMismatch {
            expected: clim.dim(),
            found: k,
        });
    }
    let base = clim.phase_mean(t0_phase % cycle)?;
    let anomaly = DVector::from_fn(k, |i, _| theta_t0.get(i) - base[i]);
    let mut states = Vec::with_capacity(horizon + 1);
    for lead in 0..=horizon {
        let pm = clim.phase_mean((t0_phase + lead) % cycle)?;
        states.push(StateVector::from_dvector(DVector::from_fn(k, |i, _| pm[i] + anomaly[i]))?);
    }
    Trajectory::new(states, 1.0, t0_phase as f64)
}
