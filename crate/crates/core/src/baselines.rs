//! Reference methods: exact Kalman filter, stochastic EnKF, persistence and
//! climatology ensembles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ObservationSet;
use crate::dynamics::{forecast, ForecastModel, SystemKind, SystemSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::state::{Climatology, Ensemble, StateVector, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    pub transition: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(transition: DMatrix<f64>, process_noise: DMatrix<f64>) -> Result<Self> {
        let d = transition.nrows();
        if transition.shape() != (d, d) || process_noise.shape() != (d, d) {
            return Err(Error::InvalidParameter("transition and process noise must be square and equal-sized".into()));
        }
        if linalg::symmetrize(&process_noise).cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("process noise"));
        }
        Ok(Self {
            transition,
            process_noise,
        })
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self> {
        match &spec.kind {
            SystemKind::LinearGaussian {
                transition,
                process_noise,
            } => Self::new(transition.clone(), process_noise.clone()),
            _ => Err(Error::InvalidParameter("system is not linear-Gaussian".into())),
        }
    }

    pub fn dim(&self) -> usize {
        self.transition.nrows()
    }

    /// Stationary mean (zero) and covariance.
    pub fn stationary(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((DVector::zeros(self.dim()), linalg::discrete_lyapunov(&self.transition, &self.process_noise)?))
    }
}

/// Filtered mean and covariance at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Innovation `y − H m⁻` when observations were assimilated.
    pub innovation: Option<DVector<f64>>,
    /// Innovation covariance `H P⁻ Hᵀ + R`.
    pub innovation_cov: Option<DMatrix<f64>>,
}

/// Kalman update of `(mean, cov)` with direct observations.
pub fn kalman_update(mean: &DVector<f64>, cov: &DMatrix<f64>, obs: &ObservationSet) -> Result<KalmanState> {
    let d = mean.len();
    obs.check_dim(d)?;
    let k = obs.len();
    if k == 0 {
        return Ok(KalmanState {
            mean: mean.clone(),
            cov: cov.clone(),
            innovation: None,
            innovation_cov: None,
        });
    }
    let s = DMatrix::from_fn(k, k, |a, b| {
        cov[(obs.indices[a], obs.indices[b])] + if a == b { obs.sigma_o[a].powi(2) } else { 0.0 }
    });
    let innov = DVector::from_fn(k, |j, _| obs.values[j] - mean[obs.indices[j]]);
    let pht = DMatrix::from_fn(d, k, |i, j| cov[(i, obs.indices[j])]);
    let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
    // K = P Hᵀ S⁻¹
    let gain = chol.solve(&pht.transpose()).transpose();
    let new_mean = mean + &gain * &innov;
    // Joseph-free form, symmetrized: P − K H P
    let new_cov = linalg::symmetrize(&(cov - &gain * pht.transpose()));
    Ok(KalmanState {
        mean: new_mean,
        cov: new_cov,
        innovation: Some(innov),
        innovation_cov: Some(s),
    })
}

/// Exact filter for `n_steps + 1` times: update at time 0, then
/// predict/update for times `1..=n_steps`. Observations are matched by
/// `time_index`.
pub fn kalman_filter(
    lg: &LinearGaussianModel,
    obs_stream: &[ObservationSet],
    n_steps: usize,
    x0_mean: &DVector<f64>,
    x0_cov: &DMatrix<f64>,
) -> Result<Vec<KalmanState>> {
    let d = lg.dim();
    Error::check_dim(d, x0_mean.len())?;
    Error::check_dim(d, x0_cov.nrows())?;
    let eig = linalg::sym_eigen_desc(&linalg::symmetrize(x0_cov)).0;
    if eig[d - 1] < -1e-10 * eig[0].abs().max(1.0) {
        return Err(Error::NotPositiveDefinite("initial covariance"));
    }
    let empty = ObservationSet::empty(0);
    let find = |t: u64| obs_stream.iter().find(|o| o.time_index == t).unwrap_or(&empty);
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut st = kalman_update(x0_mean, x0_cov, find(0))?;
    out.push(st.clone());
    for t in 1..=n_steps as u64 {
        let m = &lg.transition * &st.mean;
        let p = linalg::symmetrize(&(&lg.transition * &st.cov * lg.transition.transpose() + &lg.process_noise));
        st = kalman_update(&m, &p, find(t))?;
        out.push(st.clone());
    }
    Ok(out)
}

/// Stochastic (perturbed-observation) EnKF analysis with multiplicative
/// inflation of the forecast anomalies.
pub fn enkf_step(ens: &Ensemble, obs: &ObservationSet, inflation: f64, seed: u64) -> Result<Ensemble> {
    let m = ens.size();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: m });
    }
    if !(inflation >= 1.0) {
        return Err(Error::InvalidParameter("inflation must be ≥ 1".into()));
    }
    let d = ens.dim();
    obs.check_dim(d)?;
    let mean = ens.mean();
    let members: Vec<DVector<f64>> = ens
        .members()
        .iter()
        .map(|x| &mean + (x.values() - &mean) * inflation)
        .collect();
    if obs.is_empty() {
        let states = members.into_iter().map(StateVector::from_dvector).collect::<Result<_>>()?;
        return Ensemble::new(states, ens.member_seeds().to_vec());
    }
    let k = obs.len();
    let anomalies = DMatrix::from_fn(d, m, |i, j| members[j][i] - mean[i]);
    let ha = DMatrix::from_fn(k, m, |a, j| anomalies[(obs.indices[a], j)]);
    let scale = 1.0 / (m as f64 - 1.0);
    let mut s = &ha * ha.transpose() * scale;
    for a in 0..k {
        s[(a, a)] += obs.sigma_o[a].powi(2);
    }
    let pht = &anomalies * ha.transpose() * scale;
    let chol = s.cholesky().ok_or(Error::NotPositiveDefinite("EnKF innovation covariance"))?;
    let gain = chol.solve(&pht.transpose()).transpose();
    let mut r = rng::stream(seed, "enkf-perturb", &[obs.time_index]);
    let states = members
        .into_iter()
        .map(|x| {
            let innov = DVector::from_fn(k, |a, _| {
                obs.values[a] + obs.sigma_o[a] * rng::normal(&mut r) - x[obs.indices[a]]
            });
            StateVector::from_dvector(&x + &gain * innov)
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(states, ens.member_seeds().to_vec())
}

/// EnKF cycle: analysis at time 0, then forecast/analysis for `1..=n_steps`.
/// Time `t` forecasts from global step `start_step + t − 1`.
pub fn enkf_cycle(
    forecaster: &ForecastModel,
    init: &Ensemble,
    obs_stream: &[ObservationSet],
    n_steps: usize,
    inflation: f64,
    start_step: u64,
    seed: u64,
) -> Result<Vec<Ensemble>> {
    let empty = ObservationSet::empty(0);
    let find = |t: u64| obs_stream.iter().find(|o| o.time_index == t).unwrap_or(&empty);
    let mut ens = enkf_step(init, find(0), inflation, rng::derive(seed, "enkf", &[0]))?;
    let mut out = vec![ens.clone()];
    for t in 1..=n_steps as u64 {
        let states = ens
            .members()
            .iter()
            .enumerate()
            .map(|(k, x)| forecast(x, forecaster, start_step + t - 1, 1, rng::derive(seed, "enkf-forecast", &[t, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        let prior = Ensemble::new(states, ens.member_seeds().to_vec())?;
        ens = enkf_step(&prior, find(t), inflation, rng::derive(seed, "enkf", &[t]))?;
        out.push(ens.clone());
    }
    Ok(out)
}

pub fn persistence_forecast(x0: &StateVector, _lead: usize) -> StateVector {
    x0.clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClimatologyMode {
    /// Independent `N(mean, std²)` per coordinate.
    Gaussian,
    /// Snapshots drawn with replacement from a stored archive.
    Resample,
}

/// Climatological benchmark ensemble of size `m`. `archive` is required in
/// resample mode.
pub fn climatology_ensemble(
    clim: &Climatology,
    m: usize,
    mode: ClimatologyMode,
    archive: Option<&Trajectory>,
    seed: u64,
) -> Result<Ensemble> {
    if m == 0 {
        return Err(Error::InvalidParameter("ensemble size must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "climatology-ensemble", &[]);
    let members = match mode {
        ClimatologyMode::Gaussian => (0..m)
            .map(|_| {
                let z = rng::normal_vector(&mut r, clim.dim());
                StateVector::from_dvector(&clim.mean + clim.std.component_mul(&z))
            })
            .collect::<Result<Vec<_>>>()?,
        ClimatologyMode::Resample => {
            let arch = archive.ok_or(Error::InvalidParameter("resample mode needs an archive".into()))?;
            if arch.is_empty() {
                return Err(Error::Empty("climatology archive"));
            }
            (0..m).map(|_| arch.states()[r.random_range(0..arch.len())].clone()).collect()
        }
    };
    let seeds = (0..m as u64).map(|i| rng::derive(seed, "climatology-ensemble", &[i])).collect();
    Ensemble::new(members, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_update_halves_variance() {
        let obs = ObservationSet::new(vec![0], vec![1.0], vec![1.0], 0).unwrap();
        let st = kalman_update(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 1.0), &obs).unwrap();
        assert!((st.mean[0] - 0.5).abs() < 1e-15);
        assert!((st.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_obs_follows_lyapunov_recursion() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let q = DMatrix::identity(2, 2) * 0.1;
        let lg = LinearGaussianModel::new(a.clone(), q.clone()).unwrap();
        let p0 = DMatrix::identity(2, 2);
        let out = kalman_filter(&lg, &[], 3, &DVector::from_vec(vec![1.0, 1.0]), &p0).unwrap();
        let mut p = p0;
        for st in out.iter().skip(1) {
            p = &a * &p * a.transpose() + &q;
            assert!((&st.cov - &p).norm() < 1e-14);
        }
    }

    #[test]
    fn enkf_identity_without_obs() {
        let ens = Ensemble::from_members(vec![
            StateVector::new(vec![1.0, 2.0]).unwrap(),
            StateVector::new(vec![0.0, -1.0]).unwrap(),
        ])
        .unwrap();
        let out = enkf_step(&ens, &ObservationSet::empty(0), 1.0, 1).unwrap();
        assert_eq!(out.members(), ens.members());
    }

    #[test]
    fn enkf_huge_obs_error_is_no_op() {
        let ens = Ensemble::from_members(vec![
            StateVector::new(vec![1.0, 2.0]).unwrap(),
            StateVector::new(vec![0.0, -1.0]).unwrap(),
            StateVector::new(vec![0.5, 0.3]).unwrap(),
        ])
        .unwrap();
        let obs = ObservationSet::new(vec![0], vec![10.0], vec![1e12], 0).unwrap();
        let out = enkf_step(&ens, &obs, 1.0, 1).unwrap();
        for (a, b) in out.members().iter().zip(ens.members()) {
            assert!((a.values() - b.values()).amax() < 1e-8);
        }
    }

    #[test]
    fn persistence_is_identity() {
        let x = StateVector::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(persistence_forecast(&x, 0), x);
        assert_eq!(persistence_forecast(&x, 17), x);
    }
}
