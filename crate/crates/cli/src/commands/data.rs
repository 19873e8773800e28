use gap_core::baselines::LinearGaussianModel;
use gap_core::diffusion::{build_schedule, train_score as fit_score, ScoreModel, ScoreTraining};
use gap_core::dynamics::{forecast, simulate, train_forecaster as fit_forecaster, ForecasterTraining};
use gap_core::rng;
use gap_core::{fit_climatology, generate_dataset, ForecastKind};
use serde_json::json;

use super::{base_forecaster, with_configured_bias, load_climatology, load_data, load_holdout, write_rows, ScoreArtifact};
use crate::artifacts::{attrs, Run};
use crate::config::{ScoreChoice, CLIMATOLOGY_FILE, DATA_FILE, FORECASTER_FILE, HOLDOUT_FILE, SCORE_FILE};
use crate::error::{CliError, CliResult};
use crate::metrics::MetricRow;
use crate::tensor::Tensor;

/// Training trajectory, held-out truth run and climatology.
pub fn generate_data(run: &mut Run) -> CliResult<()> {
    let spec = run.cfg.system.to_spec()?;
    let d = run.cfg.data.clone();
    let seed = run.seed();
    if d.n_samples < 2 {
        return Err(CliError::Config("data.n_samples must be at least 2".into()));
    }
    run.log(format!("generating {} samples of {}-dimensional data", d.n_samples, spec.dim));
    let data = generate_dataset(&spec, d.n_spinup, d.n_samples, d.thin, rng::derive(seed, "data", &[]))?;
    let clim = fit_climatology(&data, d.cycle_len)?;

    let last_step = (d.n_spinup + (d.n_samples - 1) * d.thin) as u64;
    let last = data.states().last().expect("non-empty data");
    let gap = simulate(&spec, last, last_step, d.holdout_gap, rng::derive(seed, "holdout-gap", &[]))?;
    let holdout_start = last_step + d.holdout_gap as u64;
    let holdout = simulate(
        &spec,
        gap.states().last().expect("non-empty run"),
        holdout_start,
        d.holdout_steps,
        rng::derive(seed, "holdout", &[]),
    )?;
    run.steps = holdout_start + d.holdout_steps as u64;

    run.write_tensor(
        DATA_FILE,
        "training-data",
        &Tensor::from_trajectory(&data),
        attrs([("start_step", d.n_spinup.into()), ("thin", d.thin.into()), ("dt", json!(spec.dt))]),
    )?;
    run.write_tensor(
        HOLDOUT_FILE,
        "truth",
        &Tensor::from_trajectory(&holdout),
        attrs([("start_step", holdout_start.into()), ("thin", 1.into()), ("dt", json!(spec.dt))]),
    )?;
    run.write_json(CLIMATOLOGY_FILE, "climatology", &clim)?;
    run.metric("n_samples", data.len() as f64);
    run.metric("holdout_states", holdout.len() as f64);
    run.metric("climatology_mean", clim.mean.mean());
    run.metric("climatology_std", clim.std.mean());
    Ok(())
}

pub fn train_score(run: &mut Run) -> CliResult<()> {
    let spec = run.cfg.system.to_spec()?;
    let dc = run.cfg.diffusion.clone();
    let data = load_data(run)?;
    let clim = load_climatology(run)?;
    let sched = build_schedule(dc.beta_min, dc.beta_max, dc.n_steps)?;
    if dc.fit_thin == 0 {
        return Err(CliError::Config("diffusion.fit_thin must be at least 1".into()));
    }
    let model = match dc.model {
        ScoreChoice::GaussianFit => ScoreModel::gaussian_fit(data.traj.states().iter().step_by(dc.fit_thin), clim)?,
        ScoreChoice::Analytic => {
            let lg = LinearGaussianModel::from_spec(&spec)?;
            let (mean, cov) = lg.stationary()?;
            ScoreModel::analytic_gaussian(mean, cov)?
        }
        ScoreChoice::Mlp => {
            run.log(format!("training score network for {} epochs", dc.epochs));
            let cfg = ScoreTraining {
                hidden_sizes: dc.hidden_sizes.clone(),
                epochs: dc.epochs,
                lr: dc.lr,
                batch: dc.batch,
                seed: rng::derive(run.seed(), "score-training", &[]),
                weighting: dc.weighting,
                tau_min: dc.tau_min,
            };
            fit_score(&data.traj, &clim, &sched, &cfg)?
        }
    };
    if let Some(net) = &model.net {
        let rows: Vec<MetricRow> = net
            .loss_curve
            .iter()
            .enumerate()
            .map(|(e, &v)| MetricRow {
                metric: "dsm_loss".into(),
                lead: e as i64,
                value: v,
                member_count: 0,
                seed: run.seed(),
            })
            .collect();
        if let Some(last) = net.loss_curve.last() {
            run.metric("final_loss", *last);
        }
        run.steps = net.loss_curve.len() as u64;
        write_rows(run, "training", &rows)?;
    }
    let artifact = ScoreArtifact {
        beta_min: dc.beta_min,
        beta_max: dc.beta_max,
        n_steps: dc.n_steps,
        model,
    };
    run.write_json(SCORE_FILE, "score", &artifact)?;
    Ok(())
}

/// Trains (learned kind) or materializes the configured forecaster and
/// reports its one-step error on held-out data.
pub fn train_forecaster(run: &mut Run) -> CliResult<()> {
    let spec = run.cfg.system.to_spec()?;
    let fcfg = run.cfg.forecaster.clone();
    let clim = load_climatology(run)?;
    let holdout = load_holdout(run)?;
    let raw = if fcfg.kind == ForecastKind::LearnedMlp {
        let data = load_data(run)?;
        if data.traj.dt != spec.dt {
            return Err(CliError::Config("learned forecasters need unthinned training data (data.thin = 1)".into()));
        }
        run.log(format!("training forecaster for {} epochs", fcfg.epochs));
        let cfg = ForecasterTraining {
            hidden_sizes: fcfg.hidden_sizes.clone(),
            epochs: fcfg.epochs,
            lr: fcfg.lr,
            batch: fcfg.batch,
            seed: rng::derive(run.seed(), "forecaster-training", &[]),
        };
        fit_forecaster(&data.traj, &cfg)?
    } else {
        base_forecaster(run, &spec)?
    };
    run.write_json(FORECASTER_FILE, "forecaster", &raw)?;
    let fc = with_configured_bias(run, raw, &clim)?;

    let n = (holdout.traj.len() - 1).min(500);
    let seed = rng::derive(run.seed(), "forecaster-check", &[]);
    let mut sq = 0.0;
    for t in 0..n {
        let x = &holdout.traj.states()[t];
        let y = forecast(x, &fc, holdout.start_step + t as u64, 1, seed)?;
        sq += ((y.values() - holdout.traj.states()[t + 1].values()).component_div(&clim.std)).norm_squared();
    }
    let rmse = (sq / (n.max(1) * spec.dim) as f64).sqrt();
    run.steps = n as u64;
    run.metric("one_step_rmse_over_std", rmse);
    run.log(format!("one-step RMSE {rmse:.4} climatological std"));
    Ok(())
}
