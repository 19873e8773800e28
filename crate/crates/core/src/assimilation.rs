//! Sequential assimilation: cold start, forecast → SDEdit → observation
//! inpainting cycles, and synthetic observation networks.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::conditioning::{apply_observation_noise, sample_conditioned, sdedit, GuidanceConfig, ObservationSet, SDEditConfig};
use crate::diffusion::{NoiseSchedule, SamplerConfig, ScoreModel};
use crate::dynamics::{forecast, ForecastModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::state::{Ensemble, StateVector, Trajectory};

/// Everything a GAP step needs besides the ensemble itself.
#[derive(Clone, Copy)]
pub struct GapContext<'a> {
    pub model: &'a ScoreModel,
    pub sched: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub forecaster: &'a ForecastModel,
    pub guidance: &'a GuidanceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssimilationConfig {
    pub window_steps: usize,
    pub obs_every: usize,
    pub ensemble_size: usize,
    pub tau_star_idx: usize,
}

impl AssimilationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_steps == 0 || self.obs_every == 0 || self.ensemble_size == 0 {
            return Err(Error::InvalidParameter(
                "window_steps, obs_every and ensemble_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub time_index: u64,
    pub prior_ensemble: Ensemble,
    pub posterior_ensemble: Ensemble,
    pub obs_used: ObservationSet,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Outcome of one forecast → SDEdit step.
pub struct StepOutput {
    pub prior: Ensemble,
    pub posterior: Ensemble,
    pub resampled: usize,
}

/// One GAP transition: every member is propagated by the forecaster, then
/// SDEdit-corrected with `obs` inpainted during the reverse pass. Members
/// whose forecast diverges are redrawn around the surviving members.
pub fn gap_step(ctx: &GapContext<'_>, ens: &Ensemble, tau_star_idx: usize, obs: Option<&ObservationSet>, step: u64, seed: u64) -> Result<StepOutput> {
    let step_seed = rng::derive(seed, "gap-step", &[step]);
    let mut ok = Vec::with_capacity(ens.size());
    let mut failed = Vec::new();
    for (m, x) in ens.members().iter().enumerate() {
        let s = rng::derive(step_seed, "member-forecast", &[m as u64]);
        match forecast(x, ctx.forecaster, step, 1, s) {
            Ok(y) => ok.push(Some(y)),
            Err(Error::Divergence { .. }) => {
                ok.push(None);
                failed.push(m);
            }
            Err(e) => return Err(e),
        }
    }
    let resampled = failed.len();
    let members: Vec<StateVector> = if failed.is_empty() {
        ok.into_iter().map(Option::unwrap).collect()
    } else {
        let alive: Vec<StateVector> = ok.iter().flatten().cloned().collect();
        if alive.is_empty() {
            return Err(Error::Divergence {
                step,
                state: ens.mean().iter().copied().collect(),
            });
        }
        let survivors = Ensemble::from_members(alive)?;
        let mean = survivors.mean();
        let spread = survivors.spread();
        let mut r = rng::stream(step_seed, "resample", &[]);
        ok.into_iter()
            .map(|o| match o {
                Some(y) => Ok(y),
                None => {
                    let z = rng::normal_vector(&mut r, mean.len());
                    StateVector::from_dvector(&mean + spread.component_mul(&z))
                }
            })
            .collect::<Result<_>>()?
    };
    let prior = Ensemble::new(members, ens.member_seeds().to_vec())?;
    let cfg = SDEditConfig {
        tau_star_idx,
        combine_obs: obs.cloned(),
    };
    let post = sdedit(
        &prior,
        ctx.model,
        ctx.sched,
        ctx.sampler,
        &cfg,
        ctx.guidance,
        1,
        rng::derive(step_seed, "sdedit", &[]),
    )?;
    let posterior = Ensemble::new(post.members().to_vec(), ens.member_seeds().to_vec())?;
    Ok(StepOutput {
        prior,
        posterior,
        resampled,
    })
}

/// Initial ensemble from the observation-conditioned climatological prior.
pub fn cold_start(ctx: &GapContext<'_>, obs0: &ObservationSet, cfg: &AssimilationConfig, seed: u64) -> Result<Ensemble> {
    cfg.validate()?;
    sample_conditioned(ctx.model, ctx.sched, ctx.sampler, obs0, ctx.guidance, cfg.ensemble_size, seed)
}

fn diagnostics(prior: &Ensemble, post: &Ensemble, truth: &StateVector, obs: &ObservationSet, resampled: usize) -> BTreeMap<String, f64> {
    let d = truth.dim() as f64;
    let rmse = |e: &Ensemble| ((e.mean() - truth.values()).norm_squared() / d).sqrt();
    let mut out = BTreeMap::new();
    out.insert("posterior_rmse".into(), rmse(post));
    out.insert("prior_rmse".into(), rmse(prior));
    out.insert("posterior_spread".into(), (post.spread().norm_squared() / d).sqrt());
    out.insert("prior_spread".into(), (prior.spread().norm_squared() / d).sqrt());
    if !obs.is_empty() {
        let mean = post.mean();
        let s: f64 = obs.indices.iter().map(|&i| (mean[i] - truth.get(i)).powi(2)).sum();
        out.insert("observed_rmse".into(), (s / obs.len() as f64).sqrt());
    }
    out.insert("resampled_members".into(), resampled as f64);
    out
}

fn obs_at(stream: &[ObservationSet], t: u64) -> Option<&ObservationSet> {
    stream.iter().find(|o| o.time_index == t)
}

/// Runs the cold start at truth index 0 and `window_steps` GAP cycles.
/// Truth index `t` corresponds to global model step `start_step + t`.
pub fn assimilation_cycle(
    ctx: &GapContext<'_>,
    truth: &Trajectory,
    obs_stream: &[ObservationSet],
    cfg: &AssimilationConfig,
    start_step: u64,
    seed: u64,
) -> Result<Vec<CycleRecord>> {
    cfg.validate()?;
    if truth.len() < cfg.window_steps + 1 {
        return Err(Error::TooFewSamples {
            needed: cfg.window_steps + 1,
            found: truth.len(),
        });
    }
    let empty0 = ObservationSet::empty(0);
    let obs0 = obs_at(obs_stream, 0).unwrap_or(&empty0);
    let mut ens = cold_start(ctx, obs0, cfg, rng::derive(seed, "cold-start", &[]))?;
    let mut records = Vec::with_capacity(cfg.window_steps + 1);
    records.push(CycleRecord {
        time_index: 0,
        prior_ensemble: ens.clone(),
        posterior_ensemble: ens.clone(),
        obs_used: obs0.clone(),
        diagnostics: diagnostics(&ens, &ens, &truth.states()[0], obs0, 0),
    });
    for t in 1..=cfg.window_steps as u64 {
        let analysis = t % cfg.obs_every as u64 == 0;
        let obs = if analysis { obs_at(obs_stream, t) } else { None };
        let out = gap_step(ctx, &ens, cfg.tau_star_idx, obs, start_step + t - 1, seed)?;
        let used = obs.cloned().unwrap_or_else(|| ObservationSet::empty(t));
        records.push(CycleRecord {
            time_index: t,
            diagnostics: diagnostics(&out.prior, &out.posterior, &truth.states()[t as usize], &used, out.resampled),
            prior_ensemble: out.prior,
            posterior_ensemble: out.posterior.clone(),
            obs_used: used,
        });
        ens = out.posterior;
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsLayout {
    RandomFixed,
    RandomPerStep,
    /// Evenly spaced coordinates.
    Regular,
}

fn layout_indices(d: usize, n_obs: usize, layout: ObsLayout, seed: u64, t: u64) -> Vec<usize> {
    let mut idx = match layout {
        ObsLayout::Regular => (0..n_obs).map(|k| k * d / n_obs.max(1)).collect(),
        ObsLayout::RandomFixed => {
            let mut r = rng::stream(seed, "obs-layout", &[]);
            index::sample(&mut r, d, n_obs).into_vec()
        }
        ObsLayout::RandomPerStep => {
            let mut r = rng::stream(seed, "obs-layout", &[t]);
            index::sample(&mut r, d, n_obs).into_vec()
        }
    };
    idx.sort_unstable();
    idx
}

/// Synthetic observation stream at truth indices `0, obs_every, 2·obs_every, …`.
pub fn simulate_obs_network(
    truth: &Trajectory,
    n_obs: usize,
    sigma_o: f64,
    layout: ObsLayout,
    obs_every: usize,
    seed: u64,
) -> Result<Vec<ObservationSet>> {
    let d = truth.dim();
    if n_obs > d {
        return Err(Error::InvalidParameter(format!("n_obs = {n_obs} exceeds dim {d}")));
    }
    if obs_every == 0 || !(sigma_o >= 0.0) {
        return Err(Error::InvalidParameter("obs_every must be positive and sigma_o ≥ 0".into()));
    }
    let mut out = Vec::new();
    for t in (0..truth.len()).step_by(obs_every) {
        let idx = layout_indices(d, n_obs, layout, seed, t as u64);
        let mut tmpl = ObservationSet::template(idx, vec![sigma_o; n_obs])?;
        tmpl.time_index = t as u64;
        out.push(apply_observation_noise(&truth.states()[t], &tmpl, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_spread: f64,
    pub mean_abs_error: f64,
}

/// Distance from coordinate `i` to the nearest observed coordinate.
pub fn obs_distance(i: usize, obs: &ObservationSet, dim: usize, ring: bool) -> Option<f64> {
    obs.indices
        .iter()
        .map(|&j| {
            let raw = i.abs_diff(j);
            if ring {
                raw.min(dim - raw)
            } else {
                raw
            }
        })
        .min()
        .map(|v| v as f64)
}

/// Posterior spread and error grouped by distance to the nearest observation.
/// Bin `k` covers `[edges[k], edges[k+1])`; the last bin is open-ended.
/// Empty bins are omitted.
pub fn distance_binned_error(record: &CycleRecord, truth: &StateVector, edges: &[f64], ring: bool) -> Result<Vec<DistanceBin>> {
    let post = &record.posterior_ensemble;
    Error::check_dim(post.dim(), truth.dim())?;
    if edges.is_empty() {
        return Err(Error::Empty("distance bin edges"));
    }
    let d = truth.dim();
    let mean = post.mean();
    let spread = post.spread();
    let nb = edges.len();
    let mut acc = vec![(0usize, 0.0, 0.0); nb];
    for i in 0..d {
        let Some(dist) = obs_distance(i, &record.obs_used, d, ring) else {
            continue;
        };
        let Some(k) = (0..nb).rev().find(|&k| dist >= edges[k]) else {
            continue;
        };
        acc[k].0 += 1;
        acc[k].1 += spread[i];
        acc[k].2 += (mean[i] - truth.get(i)).abs();
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(k, (n, s, e))| DistanceBin {
            lower: edges[k],
            upper: edges.get(k + 1).copied().unwrap_or(f64::INFINITY),
            count: n,
            mean_spread: s / n as f64,
            mean_abs_error: e / n as f64,
        })
        .collect())
}

/// Ensemble-mean RMSE series of a cycle, one value per record.
pub fn rmse_series(records: &[CycleRecord]) -> Vec<f64> {
    records.iter().map(|r| r.diagnostics["posterior_rmse"]).collect()
}

/// First index at which `series` drops below `threshold`, if ever.
pub fn time_to_threshold(series: &[f64], threshold: f64) -> Option<usize> {
    series.iter().position(|&v| v < threshold)
}

