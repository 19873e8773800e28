//! Shared fixtures for the kernel benchmarks.

use gap_core::diffusion::{train_score, ScoreTraining};
use gap_core::{
    build_schedule, fit_climatology, generate_dataset, Climatology, Ensemble, NoiseSchedule, ObservationSet, ScoreModel,
    StateVector, SystemSpec, Trajectory,
};

/// Lorenz-96 (d=40, F=8) training set with a Gaussian prior and a small
/// score network trained for one epoch.
pub struct Lorenz96Fixture {
    pub spec: SystemSpec,
    pub data: Trajectory,
    pub clim: Climatology,
    pub sched: NoiseSchedule,
    pub gaussian: ScoreModel,
    pub mlp: ScoreModel,
}

pub fn lorenz96(n_samples: usize) -> Lorenz96Fixture {
    let spec = SystemSpec::lorenz96(40, 8.0);
    let data = generate_dataset(&spec, 1000, n_samples, 5, 1).expect("dataset");
    let clim = fit_climatology(&data, None).expect("climatology");
    let sched = build_schedule(0.1, 20.0, 100).expect("schedule");
    let gaussian = ScoreModel::gaussian_fit(data.states(), clim.clone()).expect("gaussian fit");
    let cfg = ScoreTraining {
        hidden_sizes: vec![128, 128],
        epochs: 1,
        ..Default::default()
    };
    let mlp = train_score(&data, &clim, &sched, &cfg).expect("score network");
    Lorenz96Fixture {
        spec,
        data,
        clim,
        sched,
        gaussian,
        mlp,
    }
}

/// `m` consecutive training states as an ensemble.
pub fn ensemble(data: &Trajectory, m: usize) -> Ensemble {
    Ensemble::from_members(data.states()[..m].to_vec()).expect("ensemble")
}

/// Every `stride`-th coordinate of `x`, observed with error std 1.
pub fn observe(x: &StateVector, stride: usize) -> ObservationSet {
    let idx: Vec<usize> = (0..x.dim()).step_by(stride).collect();
    let values = idx.iter().map(|&i| x.get(i)).collect();
    let n = idx.len();
    ObservationSet::new(idx, values, vec![1.0; n], 0).expect("observations")
}
