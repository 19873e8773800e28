use gap_core::dynamics::{simulate, train_forecaster, ForecasterTraining, Perturbation, SystemKind};
use gap_core::linalg::spectral_norm;
use gap_core::{fit_climatology, forecast, generate_dataset, step_truth, ForecastModel, StateVector, SystemSpec, Trajectory};
use nalgebra::DVector;

fn lorenz63_rhs(x: &[f64; 3]) -> [f64; 3] {
    let (s, r, b) = (10.0, 28.0, 8.0 / 3.0);
    [s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]]
}

/// Dormand–Prince 5(4) with step-size control, integrating to `t_end`.
fn dopri45(mut x: [f64; 3], t_end: f64, tol: f64) -> [f64; 3] {
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let mut t: f64 = 0.0;
    let mut h: f64 = 1e-4;
    while t < t_end {
        h = h.min(t_end - t);
        let mut k = [[0.0; 3]; 7];
        for s in 0..7 {
            let mut y = x;
            for (j, kj) in k.iter().enumerate().take(s) {
                for i in 0..3 {
                    y[i] += h * A[s][j] * kj[i];
                }
            }
            k[s] = lorenz63_rhs(&y);
        }
        let mut y5 = x;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            let mut e = 0.0;
            for s in 0..7 {
                y5[i] += h * B5[s] * k[s][i];
                e += h * (B5[s] - B4[s]) * k[s][i];
            }
            err = err.max(e.abs());
        }
        if err <= tol {
            t += h;
            x = y5;
        }
        h *= (0.9 * (tol / err.max(1e-300)).powf(0.2)).clamp(0.2, 5.0);
    }
    x
}

#[test]
fn lorenz96_uniform_state_is_fixed_point() {
    let spec = SystemSpec::lorenz96(40, 8.0);
    let x = StateVector::new(vec![8.0; 40]).unwrap();
    let y = step_truth(&x, &spec, 0, 0).unwrap();
    for i in 0..40 {
        assert!((y.get(i) - 8.0).abs() < 1e-12);
    }
}

#[test]
fn lorenz63_matches_adaptive_integrator() {
    let spec = SystemSpec::lorenz63();
    let x0 = StateVector::new(vec![1.0, 1.0, 1.0]).unwrap();
    let traj = simulate(&spec, &x0, 0, 10, 0).unwrap();
    let oracle = dopri45([1.0, 1.0, 1.0], 10.0 * spec.dt, 1e-13);
    let end = traj.states().last().unwrap();
    for i in 0..3 {
        assert!((end.get(i) - oracle[i]).abs() < 1e-6, "{} vs {}", end.get(i), oracle[i]);
    }
}

#[test]
fn empty_dataset_when_no_samples() {
    let d = generate_dataset(&SystemSpec::lorenz96(8, 8.0), 10, 0, 1, 0).unwrap();
    assert!(d.is_empty());
}

#[test]
fn ou_sample_covariance_matches_lyapunov_solution() {
    let spec = SystemSpec::random_stable_ou(8, 0.2, 1).unwrap();
    let SystemKind::LinearGaussian { transition, process_noise } = &spec.kind else {
        panic!("expected a linear-Gaussian system");
    };
    // Fixed-point iteration P ← A P Aᵀ + Q as an independent oracle.
    let mut p = process_noise.clone();
    for _ in 0..5000 {
        p = transition * &p * transition.transpose() + process_noise;
    }
    let data = generate_dataset(&spec, 200, 100_000, 3, 5).unwrap();
    let (_, cov) = gap_core::linalg::sample_moments(data.states().iter().map(|s| s.values()), 8);
    let rel = (&cov - &p).norm() / p.norm();
    assert!(rel < 0.05, "relative Frobenius error {rel}");
}

#[test]
fn lorenz96_long_run_moments() {
    let data = generate_dataset(&SystemSpec::lorenz96(40, 8.0), 2000, 20_000, 5, 7).unwrap();
    let c = fit_climatology(&data, None).unwrap();
    for i in 0..40 {
        assert!((c.mean[i] - 2.3).abs() < 0.3, "mean {}", c.mean[i]);
        assert!((c.std[i] - 3.6).abs() < 0.4, "std {}", c.std[i]);
    }
}

#[test]
fn lorenz96_energy_has_no_drift() {
    let spec = SystemSpec::lorenz96(40, 8.0);
    let x0 = StateVector::from_dvector(spec.default_initial_state()).unwrap();
    let warm = simulate(&spec, &x0, 0, 2000, 0).unwrap();
    let mut x = warm.states().last().unwrap().clone();
    let energy = |s: &StateVector| s.values().norm_squared() / 40.0;
    let n = 100_000u64;
    let mut running = 0.0;
    let mut trace = Vec::new();
    for k in 0..n {
        x = step_truth(&x, &spec, 2000 + k, 0).unwrap();
        running += energy(&x);
        if (k + 1) % 1000 == 0 {
            trace.push(running / (k + 1) as f64);
        }
    }
    let long_run = *trace.last().unwrap();
    for v in &trace[4..] {
        assert!(*v > 0.5 * long_run && *v < 2.0 * long_run);
    }
}

#[test]
fn perfect_forecast_is_truth_rollout() {
    let spec = SystemSpec::lorenz96(40, 8.0);
    let x0 = StateVector::from_dvector(spec.default_initial_state()).unwrap();
    let truth = simulate(&spec, &x0, 100, 25, 9).unwrap();
    let m = ForecastModel::perfect(spec);
    let f = forecast(&x0, &m, 100, 25, 9).unwrap();
    assert_eq!(f.as_slice(), truth.states()[25].as_slice());
}

#[test]
fn bias_injection_adds_exactly() {
    let spec = SystemSpec::lorenz96(10, 8.0);
    let x0 = StateVector::from_dvector(spec.default_initial_state()).unwrap();
    let b = DVector::from_fn(10, |i, _| 0.1 * i as f64 - 0.3);
    let m = ForecastModel::perfect(spec.clone()).with_bias(b.clone()).unwrap();
    let f = forecast(&x0, &m, 0, 1, 0).unwrap();
    let t = step_truth(&x0, &spec, 0, 0).unwrap();
    assert_eq!(f.values(), &(t.values() + &b));
}

#[test]
fn imperfect_forecaster_error_centres_on_bias() {
    let spec = SystemSpec::random_stable_ou(4, 0.1, 2).unwrap();
    let b = DVector::from_vec(vec![0.3, -0.2, 0.0, 0.5]);
    let p = Perturbation {
        forcing_delta: 0.0,
        ..Default::default()
    };
    let m = ForecastModel::imperfect(&spec, &p, Some(b.clone())).unwrap();
    let x = StateVector::new(vec![0.5, -1.0, 0.2, 0.0]).unwrap();
    let trials = 1000;
    let errs: Vec<DVector<f64>> = (0..trials)
        .map(|k| {
            let truth = step_truth(&x, &spec, 0, 10_000 + k).unwrap();
            let ens: Vec<DVector<f64>> = (0..8).map(|j| forecast(&x, &m, 0, 1, k * 8 + j).unwrap().into_inner()).collect();
            let mean = ens.iter().fold(DVector::zeros(4), |a, v| a + v) / 8.0;
            mean - truth.values() - &b
        })
        .collect();
    for i in 0..4 {
        let v: Vec<f64> = errs.iter().map(|e| e[i]).collect();
        let mu = v.iter().sum::<f64>() / trials as f64;
        let sd = (v.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / (trials as f64 - 1.0)).sqrt();
        assert!(mu.abs() < 3.0 * sd / (trials as f64).sqrt(), "coordinate {i}: {mu}");
    }
}

#[test]
fn identity_dynamics_are_learned() {
    let states = vec![StateVector::new(vec![1.0, -2.0, 0.5]).unwrap(); 64];
    let data = Trajectory::new(states, 1.0, 0.0).unwrap();
    let cfg = ForecasterTraining {
        hidden_sizes: vec![16],
        epochs: 200,
        lr: 1e-2,
        batch: 16,
        seed: 0,
    };
    let m = train_forecaster(&data, &cfg).unwrap();
    let curve = &m.learned.as_ref().unwrap().loss_curve;
    assert!(*curve.last().unwrap() < 1e-6, "final loss {}", curve.last().unwrap());
    assert!(curve.last().unwrap() <= &curve[0]);
}

#[test]
fn learned_lorenz96_forecaster_is_accurate_on_held_out_data() {
    let spec = SystemSpec::lorenz96(40, 8.0);
    let train = generate_dataset(&spec, 2000, 10_000, 1, 1).unwrap();
    let cfg = ForecasterTraining {
        epochs: 20,
        ..Default::default()
    };
    let m = train_forecaster(&train, &cfg).unwrap();
    let test = generate_dataset(&spec, 3000, 500, 1, 2).unwrap();
    let clim = fit_climatology(&train, None).unwrap();
    let mut se = 0.0;
    for t in 0..test.len() - 1 {
        let f = forecast(&test.states()[t], &m, 0, 1, 0).unwrap();
        se += (f.values() - test.states()[t + 1].values()).norm_squared() / 40.0;
    }
    let rmse = (se / (test.len() - 1) as f64).sqrt();
    assert!(rmse < 0.2 * clim.std.mean(), "rmse {rmse}");
}

#[test]
fn learned_linear_map_recovers_transition() {
    let spec = SystemSpec::random_stable_ou(8, 0.3, 4).unwrap();
    let SystemKind::LinearGaussian { transition, .. } = &spec.kind else {
        panic!("expected a linear-Gaussian system");
    };
    let data = generate_dataset(&spec, 100, 50_000, 1, 3).unwrap();
    let cfg = ForecasterTraining {
        hidden_sizes: vec![32],
        epochs: 40,
        lr: 3e-3,
        ..Default::default()
    };
    let m = train_forecaster(&data, &cfg).unwrap();
    let learned = m.learned.as_ref().unwrap();
    let jac = learned.jacobian(&learned.normalizer.mean);
    let rel = spectral_norm(&(&jac - transition)) / spectral_norm(transition);
    assert!(rel < 0.1, "relative spectral error {rel}");
}

#[test]
fn training_is_deterministic_under_seed() {
    let spec = SystemSpec::lorenz96(8, 8.0);
    let data = generate_dataset(&spec, 100, 300, 1, 1).unwrap();
    let cfg = ForecasterTraining {
        hidden_sizes: vec![8],
        epochs: 3,
        ..Default::default()
    };
    let a = train_forecaster(&data, &cfg).unwrap();
    let b = train_forecaster(&data, &cfg).unwrap();
    assert_eq!(a, b);
}
