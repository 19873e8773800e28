use gap_core::assimilation::{assimilation_cycle, simulate_obs_network, AssimilationConfig};
use gap_core::baselines::{climatology_ensemble, enkf_cycle, kalman_filter, ClimatologyMode, LinearGaussianModel};
use gap_core::rng;
use gap_core::{Ensemble, ObservationSet, StateVector, Trajectory};

use super::{build_forecaster, load_climatology, load_data, load_holdout, summarize, write_rows, write_scores, Models, Truth};
use crate::artifacts::Run;
use crate::config::BaselineMethod;
use crate::error::{CliError, CliResult};
use crate::metrics::{score_series, EnsembleSeries, MetricRow, TruthContext};

/// Truth window and synthetic observations shared by `assimilate` and the
/// filtering baselines, so both see the same observation stream.
fn window_and_obs(run: &Run, holdout: &Truth) -> CliResult<(Trajectory, Vec<ObservationSet>)> {
    let a = &run.cfg.assimilation;
    let truth = holdout.window(a.start_index, a.window_steps)?;
    let obs = simulate_obs_network(
        &truth,
        a.n_obs,
        a.sigma_o,
        a.layout,
        a.obs_every,
        rng::derive(run.seed(), "observations", &[]),
    )?;
    Ok((truth, obs))
}

fn all_coords(d: usize) -> Vec<usize> {
    (0..d).collect()
}

pub fn assimilate(run: &mut Run) -> CliResult<()> {
    let holdout = load_holdout(run)?;
    let models = Models::load(run)?;
    let a = run.cfg.assimilation.clone();
    let (truth, obs) = window_and_obs(run, &holdout)?;
    let cfg = AssimilationConfig {
        window_steps: a.window_steps,
        obs_every: a.obs_every,
        ensemble_size: a.ensemble_size,
        tau_star_idx: a.tau_star_idx,
    };
    run.log(format!("{} cycles with {} members", a.window_steps, a.ensemble_size));
    let records = assimilation_cycle(
        &models.ctx(),
        &truth,
        &obs,
        &cfg,
        holdout.start_step + a.start_index as u64,
        rng::derive(run.seed(), "assimilate", &[]),
    )?;
    run.steps = (a.window_steps * a.ensemble_size) as u64;

    let analysis = EnsembleSeries::new(
        vec![records.iter().map(|r| r.posterior_ensemble.clone()).collect()],
        a.start_index,
        0,
        0,
    )?;
    let prior = EnsembleSeries::new(vec![records.iter().map(|r| r.prior_ensemble.clone()).collect()], a.start_index, 0, 0)?;
    run.write_tensor("analysis.gapt", "analysis-ensembles", &analysis.tensor, analysis.attrs())?;
    run.write_tensor("prior.gapt", "prior-ensembles", &prior.tensor, prior.attrs())?;
    run.write_json("observations.json", "observations", &obs)?;

    let coords = all_coords(models.spec.dim);
    let tc = TruthContext {
        truth: &holdout.traj,
        truth_step: holdout.start_step,
        clim: &models.clim,
        coords: &coords,
    };
    let scores = score_series(&analysis, &tc, "", run.seed())?;
    write_scores(run, &scores)?;
    let diag: Vec<MetricRow> = records
        .iter()
        .flat_map(|r| {
            r.diagnostics.iter().map(|(k, &v)| MetricRow {
                metric: k.clone(),
                lead: r.time_index as i64,
                value: v,
                member_count: a.ensemble_size,
                seed: run.seed(),
            })
        })
        .collect();
    write_rows(run, "diagnostics", &diag)?;
    summarize(run, &scores, "");
    let rmse: Vec<f64> = records.iter().map(|r| r.diagnostics["posterior_rmse"]).collect();
    let late = &rmse[rmse.len().min(10)..];
    if !late.is_empty() {
        run.metric("rmse_after_10_cycles", late.iter().sum::<f64>() / late.len() as f64);
    }
    run.metric("climatology_std", models.clim.std.mean());
    Ok(())
}

/// Persistence and climatology forecasts use the `[forecast]` cases;
/// Kalman and EnKF analyses use the `[assimilation]` window.
pub fn baseline(run: &mut Run) -> CliResult<()> {
    let b = run.cfg.baseline.clone();
    let spec = run.cfg.system.to_spec()?;
    let holdout = load_holdout(run)?;
    let clim = load_climatology(run)?;
    let seed = run.seed();
    let mut extra = Vec::new();
    let series = match b.method {
        BaselineMethod::Kalman => {
            let lg = LinearGaussianModel::from_spec(&spec)?;
            let (truth, obs) = window_and_obs(run, &holdout)?;
            let n = truth.len() - 1;
            let (m0, p0) = lg.stationary()?;
            let states = kalman_filter(&lg, &obs, n, &m0, &p0)?;
            run.steps = n as u64;
            for (t, st) in states.iter().enumerate() {
                extra.push(MetricRow {
                    metric: "posterior_std".into(),
                    lead: t as i64,
                    value: (st.cov.trace() / spec.dim as f64).sqrt(),
                    member_count: 1,
                    seed,
                });
            }
            let ens = states
                .iter()
                .map(|st| Ok(Ensemble::from_members(vec![StateVector::from_dvector(st.mean.clone())?])?))
                .collect::<CliResult<Vec<_>>>()?;
            EnsembleSeries::new(vec![ens], run.cfg.assimilation.start_index, 0, 0)?
        }
        BaselineMethod::Enkf => {
            let fc = build_forecaster(run, &spec, &clim)?;
            let (truth, obs) = window_and_obs(run, &holdout)?;
            let n = truth.len() - 1;
            let start = run.cfg.assimilation.start_index;
            let init = climatology_ensemble(
                &clim,
                b.ensemble_size,
                ClimatologyMode::Gaussian,
                None,
                rng::derive(seed, "enkf-init", &[]),
            )?;
            let out = enkf_cycle(
                &fc,
                &init,
                &obs,
                n,
                b.inflation,
                holdout.start_step + start as u64,
                rng::derive(seed, "enkf", &[]),
            )?;
            run.steps = (n * b.ensemble_size) as u64;
            EnsembleSeries::new(vec![out], start, 0, 0)?
        }
        BaselineMethod::Persistence | BaselineMethod::Climatology => {
            let f = run.cfg.forecast.clone();
            let archive = if b.method == BaselineMethod::Climatology && b.climatology_mode == ClimatologyMode::Resample {
                Some(load_data(run)?.traj)
            } else {
                None
            };
            let mut cases = Vec::with_capacity(f.n_cases);
            for c in 0..f.n_cases {
                let idx0 = f.start_index + c * f.case_spacing;
                if idx0 + f.lead_steps >= holdout.traj.len() {
                    return Err(CliError::Config(format!("forecast case {c} runs past the held-out truth")));
                }
                let x0 = &holdout.traj.states()[idx0];
                let leads = (1..=f.lead_steps)
                    .map(|k| {
                        if b.method == BaselineMethod::Persistence {
                            Ok(Ensemble::from_members(vec![x0.clone()])?)
                        } else {
                            let s = rng::derive(seed, "climatology-baseline", &[c as u64, k as u64]);
                            Ok(climatology_ensemble(&clim, b.ensemble_size, b.climatology_mode, archive.as_ref(), s)?)
                        }
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                cases.push(leads);
            }
            EnsembleSeries::new(cases, f.start_index, f.case_spacing, 1)?
        }
    };
    let method = serde_json::to_value(b.method).expect("method serializes");
    let mut attrs = series.attrs();
    attrs.insert("method".into(), method);
    run.write_tensor("baseline.gapt", "baseline-ensembles", &series.tensor, attrs)?;

    let coords = all_coords(spec.dim);
    let tc = TruthContext {
        truth: &holdout.traj,
        truth_step: holdout.start_step,
        clim: &clim,
        coords: &coords,
    };
    let mut scores = score_series(&series, &tc, "", seed)?;
    scores.probabilistic.extend(extra);
    write_scores(run, &scores)?;
    summarize(run, &scores, "");
    Ok(())
}
