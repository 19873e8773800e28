//! One function per subcommand, plus the artifact loaders they share.

mod assimilate;
mod data;
mod predict;

pub use assimilate::{assimilate, baseline};
pub use data::{generate_data, train_forecaster, train_score};
pub use predict::{calibrate_tau, climate_run, evaluate, forecast, seasonal};

use gap_core::assimilation::GapContext;
use gap_core::diffusion::{build_schedule, NoiseSchedule, SamplerConfig, ScoreModel};
use gap_core::dynamics::Perturbation;
use gap_core::rng;
use gap_core::{Climatology, Ensemble, ForecastKind, ForecastModel, GuidanceConfig, StateVector, SystemSpec, Trajectory};
use serde::{Deserialize, Serialize};

use crate::artifacts::Run;
use crate::error::{CliError, CliResult};
use crate::metrics::{csv_bytes, MetricRow, SeriesScores};

/// Stored score model together with the schedule it was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreArtifact {
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_steps: usize,
    pub model: ScoreModel,
}

/// A truth run and the global model step of its first state.
pub struct Truth {
    pub traj: Trajectory,
    pub start_step: u64,
}

impl Truth {
    /// States `start..=start + n` as a trajectory.
    pub fn window(&self, start: usize, n: usize) -> CliResult<Trajectory> {
        if start + n >= self.traj.len() {
            return Err(CliError::Config(format!(
                "window [{start}, {}] exceeds the {} held-out states",
                start + n,
                self.traj.len()
            )));
        }
        let states = self.traj.states()[start..=start + n].to_vec();
        let dt = self.traj.dt;
        Ok(Trajectory::new(states, dt, self.traj.t0 + start as f64 * dt)?)
    }
}

fn attr_u64(meta: &crate::tensor::TensorMeta, key: &str) -> CliResult<u64> {
    meta.attrs
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CliError::Config(format!("tensor {} lacks integer attribute {key}", meta.name)))
}

fn load_truth(run: &mut Run, which: &str) -> CliResult<Truth> {
    let inputs = &run.cfg.inputs;
    let path = match which {
        "data" => inputs.data.clone(),
        _ => inputs.holdout.clone(),
    }
    .expect("resolved config");
    let (t, meta) = run.read_tensor(&path, which)?;
    let start_step = attr_u64(&meta, "start_step")?;
    let spec = run.cfg.system.to_spec()?;
    let thin = attr_u64(&meta, "thin").unwrap_or(1);
    let traj = t.to_trajectory(spec.dt * thin as f64, start_step as f64 * spec.dt)?;
    Ok(Truth { traj, start_step })
}

pub fn load_data(run: &mut Run) -> CliResult<Truth> {
    load_truth(run, "data")
}

pub fn load_holdout(run: &mut Run) -> CliResult<Truth> {
    load_truth(run, "holdout")
}

pub fn load_climatology(run: &mut Run) -> CliResult<Climatology> {
    let path = run.cfg.inputs.climatology.clone().expect("resolved config");
    run.read_json(&path, "climatology")
}

/// Forecaster named by the config, without injected bias; learned weights
/// come from the forecaster artifact.
pub fn base_forecaster(run: &mut Run, spec: &SystemSpec) -> CliResult<ForecastModel> {
    let f = run.cfg.forecaster.clone();
    let fc = match f.kind {
        ForecastKind::Perfect => ForecastModel::perfect(spec.clone()),
        ForecastKind::ImperfectPhysics => ForecastModel::imperfect(
            spec,
            &Perturbation {
                forcing_delta: f.forcing_delta,
                substep_divisor: f.substep_divisor,
                relax_time: f.relax_time,
            },
            None,
        )?,
        ForecastKind::LearnedMlp => {
            let path = run.cfg.inputs.forecaster.clone().expect("resolved config");
            run.read_json(&path, "forecaster")?
        }
    };
    fc.validate()?;
    Ok(fc)
}

/// Adds the configured bias of `bias_std` climatological standard deviations.
pub fn with_configured_bias(run: &Run, fc: ForecastModel, clim: &Climatology) -> CliResult<ForecastModel> {
    let b = run.cfg.forecaster.bias_std;
    if b == 0.0 {
        return Ok(fc);
    }
    Ok(fc.with_bias(&clim.std * b)?)
}

pub fn build_forecaster(run: &mut Run, spec: &SystemSpec, clim: &Climatology) -> CliResult<ForecastModel> {
    let fc = base_forecaster(run, spec)?;
    with_configured_bias(run, fc, clim)
}

/// Everything a GAP pipeline needs.
pub struct Models {
    pub spec: SystemSpec,
    pub clim: Climatology,
    pub sched: NoiseSchedule,
    pub model: ScoreModel,
    pub forecaster: ForecastModel,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
}

impl Models {
    pub fn load(run: &mut Run) -> CliResult<Self> {
        let spec = run.cfg.system.to_spec()?;
        let clim = load_climatology(run)?;
        let path = run.cfg.inputs.score.clone().expect("resolved config");
        let score: ScoreArtifact = run.read_json(&path, "score")?;
        score.model.validate()?;
        if score.model.dim != spec.dim {
            return Err(CliError::Config(format!(
                "score model has dim {}, system has {}",
                score.model.dim, spec.dim
            )));
        }
        let sched = build_schedule(score.beta_min, score.beta_max, score.n_steps)?;
        let forecaster = build_forecaster(run, &spec, &clim)?;
        let sampler = run.cfg.conditioning.sampler.clone();
        let guidance = run.cfg.conditioning.guidance.clone();
        sampler.validate(&sched)?;
        guidance.validate()?;
        Ok(Self {
            spec,
            clim,
            sched,
            model: score.model,
            forecaster,
            sampler,
            guidance,
        })
    }

    pub fn ctx(&self) -> GapContext<'_> {
        GapContext {
            model: &self.model,
            sched: &self.sched,
            sampler: &self.sampler,
            forecaster: &self.forecaster,
            guidance: &self.guidance,
        }
    }
}

/// `m` members `x0 + std · ε`; member `k` of case `case` has its own stream.
pub fn perturbed_ensemble(x0: &StateVector, m: usize, std: f64, seed: u64, case: u64) -> CliResult<Ensemble> {
    if m == 0 {
        return Err(CliError::Config("ensemble_size must be at least 1".into()));
    }
    let members = (0..m as u64)
        .map(|k| {
            let mut r = rng::stream(seed, "initial-perturbation", &[case, k]);
            StateVector::from_dvector(x0.values() + rng::normal_vector(&mut r, x0.dim()) * std)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ensemble::from_members(members)?)
}

/// Writes `<command>_deterministic.csv` and `<command>_probabilistic.csv`.
pub fn write_scores(run: &mut Run, scores: &SeriesScores) -> CliResult<()> {
    let cmd = run.command.replace('-', "_");
    run.write_bytes(&format!("{cmd}_deterministic.csv"), "metrics", &csv_bytes(&scores.deterministic)?)?;
    run.write_bytes(&format!("{cmd}_probabilistic.csv"), "metrics", &csv_bytes(&scores.probabilistic)?)?;
    Ok(())
}

pub fn write_rows(run: &mut Run, family: &str, rows: &[MetricRow]) -> CliResult<()> {
    let cmd = run.command.replace('-', "_");
    run.write_bytes(&format!("{cmd}_{family}.csv"), "metrics", &csv_bytes(rows)?)?;
    Ok(())
}

/// Records first-lead and last-lead summaries of a scored series.
pub fn summarize(run: &mut Run, scores: &SeriesScores, prefix: &str) {
    for (rows, names) in [
        (&scores.deterministic, ["rmse", "acc"].as_slice()),
        (&scores.probabilistic, ["crps", "ssr"].as_slice()),
    ] {
        for name in names {
            let v = SeriesScores::values(rows, &format!("{prefix}{name}"));
            if let (Some(first), Some(last)) = (v.first(), v.last()) {
                run.metric(&format!("{prefix}{name}_first"), *first);
                run.metric(&format!("{prefix}{name}_last"), *last);
                run.metric(&format!("{prefix}{name}_mean"), SeriesScores::mean_of(rows, &format!("{prefix}{name}")));
            }
        }
    }
}
