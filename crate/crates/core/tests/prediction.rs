use gap_core::assimilation::{gap_step, GapContext};
use gap_core::conditioning::{anomaly_persistence, GuidanceConfig};
use gap_core::diffusion::{build_schedule, NoiseSchedule, SamplerConfig, ScoreModel};
use gap_core::dynamics::simulate;
use gap_core::prediction::{
    climate_run, ensemble_forecast, seasonal_run, ClimateReference, ClimateRunConfig, ClimateRunStats, Forcing,
};
use gap_core::rng;
use gap_core::verification::{crps, ks_two_sample};
use gap_core::{fit_climatology, generate_dataset, Climatology, Ensemble, ForecastModel, StateVector, SystemSpec, Trajectory};

struct Setup {
    spec: SystemSpec,
    data: Trajectory,
    clim: Climatology,
    model: ScoreModel,
    sched: NoiseSchedule,
    fc: ForecastModel,
    sampler: SamplerConfig,
    guidance: GuidanceConfig,
}

impl Setup {
    fn l96() -> Self {
        let spec = SystemSpec::lorenz96(40, 8.0);
        let data = generate_dataset(&spec, 2000, 20_000, 5, 11).unwrap();
        let clim = fit_climatology(&data, None).unwrap();
        Self::build(spec, data, clim, 1)
    }

    fn forced(n_samples: usize) -> Self {
        let spec = SystemSpec::lorenz96_forced(44, 4);
        let data = generate_dataset(&spec, 4000, n_samples, 1, 11).unwrap();
        let clim = fit_climatology(&data, Some(400)).unwrap();
        Self::build(spec, data, clim, 5)
    }

    fn build(spec: SystemSpec, data: Trajectory, clim: Climatology, thin: usize) -> Self {
        let model = ScoreModel::gaussian_fit(data.states().iter().step_by(thin), clim.clone()).unwrap();
        Self {
            fc: ForecastModel::perfect(spec.clone()),
            spec,
            data,
            clim,
            model,
            sched: build_schedule(0.1, 20.0, 100).unwrap(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
        }
    }

    fn ctx(&self) -> GapContext<'_> {
        GapContext {
            model: &self.model,
            sched: &self.sched,
            sampler: &self.sampler,
            forecaster: &self.fc,
            guidance: &self.guidance,
        }
    }

    fn perturbed(&self, x0: &StateVector, m: usize, std: f64, seed: u64) -> Ensemble {
        let mut r = rng::stream(seed, "init", &[]);
        let members = (0..m)
            .map(|_| StateVector::from_dvector(x0.values() + rng::normal_vector(&mut r, x0.dim()) * std).unwrap())
            .collect();
        Ensemble::from_members(members).unwrap()
    }
}

#[test]
fn ode_pipeline_with_perfect_forecaster_follows_truth() {
    let s = Setup::l96();
    let x0 = s.data.states()[500].clone();
    let init = s.perturbed(&x0, 4, 0.5, 1);
    let run = ensemble_forecast(&s.ctx(), &init, 0, 20, Forcing::None, 1000, 9).unwrap();
    assert_eq!(run.per_lead_ensembles.len(), 20);
    for (m, x) in init.members().iter().enumerate() {
        let truth = simulate(&s.spec, x, 1000, 20, 0).unwrap();
        for lead in 0..20 {
            let got = &run.per_lead_ensembles[lead].members()[m];
            let err = (got.values() - truth.states()[lead + 1].values()).amax();
            assert!(err < 1e-6, "member {m} lead {lead}: {err}");
        }
    }
}

#[test]
fn single_member_forecast_has_mae_crps() {
    let s = Setup::l96();
    let x0 = s.data.states()[800].clone();
    let init = Ensemble::from_members(vec![x0.clone()]).unwrap();
    let run = ensemble_forecast(&s.ctx(), &init, 10, 5, Forcing::None, 4000, 2).unwrap();
    let truth = simulate(&s.spec, &x0, 4000, 5, 0).unwrap();
    for (lead, ens) in run.per_lead_ensembles.iter().enumerate() {
        assert_eq!(ens.size(), 1);
        for i in 0..40 {
            let t = truth.states()[lead + 1].get(i);
            let c = crps(&ens.coordinate(i), t).unwrap();
            assert_eq!(c, (ens.members()[0].get(i) - t).abs());
        }
    }
}

#[test]
fn lead_one_forecast_is_one_gap_step() {
    let s = Setup::l96();
    let init = s.perturbed(&s.data.states()[100], 8, 0.3, 4);
    let ctx = s.ctx();
    let run = ensemble_forecast(&ctx, &init, 10, 1, Forcing::None, 777, 21).unwrap();
    let step = gap_step(&ctx, &init, 10, None, 777, 21).unwrap();
    assert_eq!(run.per_lead_ensembles[0], step.posterior);
}

#[test]
fn invalid_lengths_are_rejected() {
    let s = Setup::l96();
    let init = s.perturbed(&s.data.states()[0], 2, 0.1, 0);
    assert!(ensemble_forecast(&s.ctx(), &init, 5, 0, Forcing::None, 0, 0).is_err());
    let short = Trajectory::new(vec![StateVector::zeros(4); 3], 1.0, 0.0).unwrap();
    assert!(seasonal_run(&s.ctx(), &init, &short, 5, 5, 0, 0).is_err());
}

#[test]
fn seasonal_run_pins_forcing_coordinates() {
    let s = Setup::forced(40_000);
    let start = 1_000_123;
    let x0 = s.data.states()[20_000].clone();
    let theta0 = StateVector::new(x0.as_slice()[..4].to_vec()).unwrap();
    let fpred = anomaly_persistence(&theta0, &s.clim, (start % 400) as usize, 30).unwrap();
    let init = s.perturbed(&x0, 6, 0.2, 3);
    let run = seasonal_run(&s.ctx(), &init, &fpred, 10, 30, start, 8).unwrap();
    for (k, ens) in run.per_lead_ensembles.iter().enumerate() {
        let theta = fpred.states()[k + 1].as_slice();
        for m in ens.members() {
            assert_eq!(&m.as_slice()[..4], theta, "lead {}", k + 1);
        }
    }
}

#[test]
fn zero_anomaly_forcing_matches_free_run_marginals() {
    let s = Setup::forced(100_000);
    let ctx = s.ctx();
    let (lead, m) = (120, 8);
    let mut forced = Vec::new();
    let mut free = Vec::new();
    for c in 0..24u64 {
        let start = 1_000_000 + c * 977;
        let x0 = s.data.states()[(c as usize * 3917 + 1000) % 95_000].clone();
        let phase = (start % 400) as usize;
        let theta0 = StateVector::new(s.clim.phase_mean(phase).unwrap().as_slice()[..4].to_vec()).unwrap();
        let fpred = anomaly_persistence(&theta0, &s.clim, phase, lead).unwrap();
        let init = s.perturbed(&x0, m, 0.2, c);
        let a = seasonal_run(&ctx, &init, &fpred, 10, lead, start, 40 + c).unwrap();
        let b = ensemble_forecast(&ctx, &init, 10, lead, Forcing::None, start, 40 + c).unwrap();
        for k in 0..m {
            // One atmosphere coordinate per member keeps the pooled samples nearly independent.
            let i = 4 + (c as usize * m + k) % 40;
            forced.push(a.per_lead_ensembles[lead - 1].members()[k].get(i));
            free.push(b.per_lead_ensembles[lead - 1].members()[k].get(i));
        }
    }
    let ks = ks_two_sample(&forced, &free).unwrap();
    assert!(ks.p_value > 0.05, "D {} p {}", ks.statistic, ks.p_value);
}

#[test]
fn empty_climate_run_has_empty_stats() {
    let s = Setup::l96();
    let reference = ClimateReference::from_trajectory(&s.data, (0..40).collect()).unwrap();
    let cfg = ClimateRunConfig {
        n_steps: 0,
        ..Default::default()
    };
    let out = climate_run(&s.ctx(), &s.data.states()[0], &cfg, Forcing::None, &s.clim, &reference, 0, 1).unwrap();
    assert_eq!(out.stats, ClimateRunStats::new(40, None));
    assert!(out.final_state.is_none());
}

#[test]
fn streaming_stats_match_stored_trajectory() {
    let s = Setup::l96();
    let reference = ClimateReference::from_trajectory(&s.data, (0..40).collect()).unwrap();
    let cfg = ClimateRunConfig {
        n_steps: 300,
        thin: 1,
        burn_in: 0,
        trace_every: 100,
        ..Default::default()
    };
    let ctx = s.ctx();
    let a = climate_run(&ctx, &s.data.states()[10], &cfg, Forcing::None, &s.clim, &reference, 50, 1).unwrap();
    let b = climate_run(&ctx, &s.data.states()[2000], &cfg, Forcing::None, &s.clim, &reference, 9000, 2).unwrap();
    let ta = a.trajectory.as_ref().unwrap();
    assert_eq!(ta.len(), 300);
    assert_eq!(a.final_state.as_ref().unwrap(), ta.states().last().unwrap());
    assert_eq!(a.stats.global_mean_trace.len(), 3);

    let mut merged = a.stats.clone();
    merged.merge(&b.stats);
    let all: Vec<&StateVector> = ta.states().iter().chain(b.trajectory.as_ref().unwrap().states()).collect();
    let n = all.len() as f64;
    for i in [0, 17, 39] {
        let mean = all.iter().map(|x| x.get(i)).sum::<f64>() / n;
        let var = all.iter().map(|x| (x.get(i) - mean).powi(2)).sum::<f64>() / n;
        assert!((merged.running_mean[i] - mean).abs() < 1e-10);
        assert!((merged.running_var()[i] - var).abs() < 1e-9);
    }
    let g = all.iter().map(|x| x.as_slice().iter().sum::<f64>() / 40.0).sum::<f64>() / n;
    assert!((merged.running_global_mean() - g).abs() < 1e-10);
    assert_eq!(merged.count, 600);
}

#[test]
fn free_run_stays_finite_with_bounded_variance() {
    let s = Setup::l96();
    let reference = ClimateReference::from_trajectory(&s.data, (0..40).collect()).unwrap();
    let cfg = ClimateRunConfig {
        n_steps: 20_000,
        ..Default::default()
    };
    let out = climate_run(&s.ctx(), &s.data.states()[3999], &cfg, Forcing::None, &s.clim, &reference, 100_000, 5).unwrap();
    assert_eq!(out.stats.nonfinite_events, 0);
    assert!(out.final_state.unwrap().as_slice().iter().all(|v| v.is_finite()));
    let var = out.stats.running_var();
    for i in 0..40 {
        let r = var[i] / s.clim.std[i].powi(2);
        assert!((0.25..=4.0).contains(&r), "coordinate {i}: variance ratio {r}");
    }
    assert!(out.stats.max_running_mean_deviation < 0.5 * reference.global_std);
}

#[test]
fn shifted_forcing_shifts_equilibrium_mean() {
    let s = Setup::forced(40_000);
    let reference = ClimateReference::from_trajectory(&s.data, (4..44).collect()).unwrap();
    let cfg = ClimateRunConfig {
        n_steps: 8_000,
        burn_in: 1_000,
        trace_every: 0,
        ..Default::default()
    };
    let ctx = s.ctx();
    let shifts = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let means: Vec<f64> = shifts
        .iter()
        .map(|&d| {
            let f = Forcing::ShiftedSeasonal { spec: &s.spec, shift: d };
            let out = climate_run(&ctx, s.data.states().last().unwrap(), &cfg, f, &s.clim, &reference, 2_000_000, 3).unwrap();
            out.stats.running_global_mean()
        })
        .collect();
    let slope: f64 = shifts.iter().zip(&means).map(|(d, m)| d * m).sum::<f64>() / 10.0;
    assert!(slope > 0.0, "means {means:?}");
}
