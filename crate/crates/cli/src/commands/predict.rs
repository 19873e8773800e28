use gap_core::conditioning::{anomaly_persistence, calibrate_tau_star, CalibrationConfig, TauReport};
use gap_core::prediction::{climate_run as run_climate, ClimateReference, ClimateRunConfig};
use gap_core::rng;
use gap_core::{ensemble_forecast, seasonal_run, Forcing, StateVector};
use serde::Serialize;

use super::{load_climatology, load_data, load_holdout, perturbed_ensemble, summarize, write_rows, write_scores, Models, Truth};
use crate::artifacts::{attrs, Run};
use crate::config::FORECAST_FILE;
use crate::error::{CliError, CliResult};
use crate::metrics::{score_series, EnsembleSeries, MetricRow, TruthContext};
use crate::tensor::Tensor;

fn check_case(holdout: &Truth, idx0: usize, leads: usize, c: usize) -> CliResult<()> {
    if idx0 + leads >= holdout.traj.len() {
        return Err(CliError::Config(format!(
            "case {c} needs truth index {}, held-out run has {} states",
            idx0 + leads,
            holdout.traj.len()
        )));
    }
    Ok(())
}

pub fn forecast(run: &mut Run) -> CliResult<()> {
    let holdout = load_holdout(run)?;
    let models = Models::load(run)?;
    let f = run.cfg.forecast.clone();
    let seed = run.seed();
    let ctx = models.ctx();
    let mut cases = Vec::with_capacity(f.n_cases);
    for c in 0..f.n_cases {
        let idx0 = f.start_index + c * f.case_spacing;
        check_case(&holdout, idx0, f.lead_steps, c)?;
        let init = perturbed_ensemble(&holdout.traj.states()[idx0], f.ensemble_size, f.init_std, seed, c as u64)?;
        let out = ensemble_forecast(
            &ctx,
            &init,
            f.tau_star_idx,
            f.lead_steps,
            Forcing::None,
            holdout.start_step + idx0 as u64,
            rng::derive(seed, "forecast", &[c as u64]),
        )?;
        cases.push(out.per_lead_ensembles);
        run.log(format!("case {}/{} done", c + 1, f.n_cases));
    }
    run.steps = (f.n_cases * f.lead_steps * f.ensemble_size) as u64;
    let series = EnsembleSeries::new(cases, f.start_index, f.case_spacing, 1)?;
    run.write_tensor(FORECAST_FILE, "forecast-ensembles", &series.tensor, series.attrs())?;
    let coords: Vec<usize> = (0..models.spec.dim).collect();
    let tc = TruthContext {
        truth: &holdout.traj,
        truth_step: holdout.start_step,
        clim: &models.clim,
        coords: &coords,
    };
    let scores = score_series(&series, &tc, "", seed)?;
    write_scores(run, &scores)?;
    summarize(run, &scores, "");
    Ok(())
}

/// Forecasts with the forcing coordinates pinned to persisted anomalies,
/// optionally next to free-running forecasts from the same initial ensembles.
pub fn seasonal(run: &mut Run) -> CliResult<()> {
    let holdout = load_holdout(run)?;
    let models = Models::load(run)?;
    let s = run.cfg.seasonal.clone();
    let seed = run.seed();
    let nf = models.spec.forcing_indices().len();
    let cycle = models.clim.cycle_len();
    let (true, Some(cycle)) = (nf > 0, cycle) else {
        return Err(CliError::Config(
            "seasonal runs need a forced system and a per-phase climatology".into(),
        ));
    };
    let ctx = models.ctx();
    let mut forced = Vec::with_capacity(s.n_cases);
    let mut free = Vec::new();
    for c in 0..s.n_cases {
        let idx0 = s.start_index + c * s.case_spacing;
        check_case(&holdout, idx0, s.lead_steps, c)?;
        let x0 = &holdout.traj.states()[idx0];
        let step0 = holdout.start_step + idx0 as u64;
        let theta0 = StateVector::new(x0.as_slice()[..nf].to_vec())?;
        let fpred = anomaly_persistence(&theta0, &models.clim, (step0 % cycle as u64) as usize, s.lead_steps)?;
        let init = perturbed_ensemble(x0, s.ensemble_size, s.init_std, seed, c as u64)?;
        let case_seed = rng::derive(seed, "seasonal", &[c as u64]);
        forced.push(seasonal_run(&ctx, &init, &fpred, s.tau_star_idx, s.lead_steps, step0, case_seed)?.per_lead_ensembles);
        if s.include_free_run {
            let out = ensemble_forecast(&ctx, &init, s.tau_star_idx, s.lead_steps, Forcing::None, step0, case_seed)?;
            free.push(out.per_lead_ensembles);
        }
        run.log(format!("case {}/{} done", c + 1, s.n_cases));
    }
    let runs = if s.include_free_run { 2 } else { 1 };
    run.steps = (runs * s.n_cases * s.lead_steps * s.ensemble_size) as u64;

    let coords: Vec<usize> = (nf..models.spec.dim).collect();
    let tc = TruthContext {
        truth: &holdout.traj,
        truth_step: holdout.start_step,
        clim: &models.clim,
        coords: &coords,
    };
    let forced = EnsembleSeries::new(forced, s.start_index, s.case_spacing, 1)?;
    let mut a = forced.attrs();
    a.insert("coords".into(), coords.clone().into());
    run.write_tensor("seasonal.gapt", "forced-forecast-ensembles", &forced.tensor, a.clone())?;
    let mut scores = score_series(&forced, &tc, "", seed)?;
    summarize(run, &scores, "");
    if s.include_free_run {
        let free = EnsembleSeries::new(free, s.start_index, s.case_spacing, 1)?;
        run.write_tensor("free.gapt", "free-forecast-ensembles", &free.tensor, a)?;
        let fs = score_series(&free, &tc, "free_", seed)?;
        summarize(run, &fs, "free_");
        scores.deterministic.extend(fs.deterministic);
        scores.probabilistic.extend(fs.probabilistic);
    }
    write_scores(run, &scores)?;
    Ok(())
}

pub fn climate_run(run: &mut Run) -> CliResult<()> {
    let data = load_data(run)?;
    let holdout = load_holdout(run)?;
    let models = Models::load(run)?;
    let c = run.cfg.climate.clone();
    let nf = models.spec.forcing_indices().len();
    let coords: Vec<usize> = (nf..models.spec.dim).collect();
    let reference = ClimateReference::from_trajectory(&data.traj, coords)?;
    let forcing = match c.forcing_shift {
        None => Forcing::None,
        Some(_) if nf == 0 => {
            return Err(CliError::Config("climate.forcing_shift needs a forced system".into()));
        }
        Some(shift) => Forcing::ShiftedSeasonal {
            spec: &models.spec,
            shift,
        },
    };
    let cfg = ClimateRunConfig {
        tau_star_idx: c.tau_star_idx,
        n_steps: c.n_steps,
        cadence: c.cadence,
        thin: c.thin,
        burn_in: c.burn_in,
        trace_every: c.trace_every,
    };
    let init = holdout.traj.states().last().expect("non-empty holdout");
    let start = holdout.start_step + holdout.traj.len() as u64 - 1;
    run.log(format!("free run of {} steps", c.n_steps));
    let out = run_climate(
        &models.ctx(),
        init,
        &cfg,
        forcing,
        &models.clim,
        &reference,
        start,
        rng::derive(run.seed(), "climate-run", &[]),
    )?;
    run.steps = c.n_steps;
    run.write_json("climate_stats.json", "climate-statistics", &out.stats)?;
    if let Some(traj) = &out.trajectory {
        run.write_tensor(
            "climate.gapt",
            "climate-trajectory",
            &Tensor::from_trajectory(traj),
            attrs([("start_step", (start + c.thin).into()), ("thin", c.thin.into())]),
        )?;
    }
    let seed = run.seed();
    let trace: Vec<MetricRow> = out
        .stats
        .global_mean_trace
        .iter()
        .map(|&(step, v)| MetricRow {
            metric: "running_global_mean".into(),
            lead: step as i64,
            value: v,
            member_count: 1,
            seed,
        })
        .collect();
    write_rows(run, "trace", &trace)?;
    let var = out.stats.running_var();
    let ratios: Vec<f64> = reference
        .coords
        .iter()
        .map(|&i| var[i] / models.clim.std[i].powi(2))
        .collect();
    run.metric("running_global_mean", out.stats.running_global_mean());
    run.metric("reference_global_mean", reference.global_mean);
    run.metric("reference_global_std", reference.global_std);
    run.metric(
        "max_running_mean_deviation_over_std",
        out.stats.max_running_mean_deviation / reference.global_std,
    );
    run.metric("nonfinite_events", out.stats.nonfinite_events as f64);
    run.metric("excursions", out.stats.excursion_log.len() as f64);
    run.metric("min_variance_ratio", ratios.iter().copied().fold(f64::INFINITY, f64::min));
    run.metric("max_variance_ratio", ratios.iter().copied().fold(0.0, f64::max));
    Ok(())
}

#[derive(Serialize)]
struct CalibrationOutput<'a> {
    best_tau_star_idx: usize,
    reports: &'a [TauReport],
}

pub fn calibrate_tau(run: &mut Run) -> CliResult<()> {
    let holdout = load_holdout(run)?;
    let models = Models::load(run)?;
    let k = run.cfg.calibration.clone();
    let cfg = CalibrationConfig {
        candidates: k.candidates.clone(),
        n_ens: k.n_ens,
        n_cases: k.n_cases,
        lead_steps: k.lead_steps,
        start_step: holdout.start_step,
        seed: rng::derive(run.seed(), "calibration", &[]),
    };
    run.log(format!("scoring {} candidate noise levels", k.candidates.len()));
    let (best, reports) = calibrate_tau_star(
        &models.model,
        &models.sched,
        &models.sampler,
        &models.guidance,
        &models.forecaster,
        &holdout.traj,
        &cfg,
    )?;
    run.steps = (k.candidates.len() * k.n_cases * k.n_ens) as u64;
    run.write_json(
        "calibration.json",
        "calibration",
        &CalibrationOutput {
            best_tau_star_idx: best,
            reports: &reports,
        },
    )?;
    let seed = run.seed();
    let rows: Vec<MetricRow> = reports
        .iter()
        .flat_map(|r| {
            [
                ("crps", r.crps),
                ("normalized_mae", r.normalized_mae),
                ("spectrum_distance", r.spectrum_distance),
            ]
            .map(|(m, v)| MetricRow {
                metric: m.into(),
                lead: r.tau_star_idx as i64,
                value: v,
                member_count: k.n_ens,
                seed,
            })
        })
        .collect();
    write_rows(run, "noise_levels", &rows)?;
    run.metric("best_tau_star_idx", best as f64);
    Ok(())
}

/// Scores a stored ensemble series against the held-out truth.
pub fn evaluate(run: &mut Run) -> CliResult<()> {
    let holdout = load_holdout(run)?;
    let clim = load_climatology(run)?;
    let path = run.cfg.inputs.forecast.clone().expect("resolved config");
    let (t, meta) = run.read_tensor(&path, "forecast")?;
    let series = EnsembleSeries::from_tensor(t, &meta)?;
    let coords: Vec<usize> = match meta.attrs.get("coords") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("tensor {} has malformed coords: {e}", meta.name)))?,
        None => (0..clim.dim()).collect(),
    };
    if coords.iter().any(|&i| i >= clim.dim()) {
        return Err(CliError::Config(format!("tensor {} lists coordinates beyond dim {}", meta.name, clim.dim())));
    }
    let tc = TruthContext {
        truth: &holdout.traj,
        truth_step: holdout.start_step,
        clim: &clim,
        coords: &coords,
    };
    let scores = score_series(&series, &tc, "", run.seed())?;
    write_scores(run, &scores)?;
    summarize(run, &scores, "");
    run.steps = (series.n_cases() * series.n_times()) as u64;
    Ok(())
}
