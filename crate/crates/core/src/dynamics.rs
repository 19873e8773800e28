//! Surrogate "truth" systems, dataset generation and one-step forecasters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{cosine_lr, Adam, Mlp};
use crate::rng;
use crate::state::{fit_climatology, Climatology, StateVector, Trajectory};

/// Dynamical law of a surrogate system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// `x' = A x + w`, `w ~ N(0, Q)`, already discretized at `dt`.
    LinearGaussian {
        transition: DMatrix<f64>,
        process_noise: DMatrix<f64>,
    },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { forcing: f64 },
    /// Lorenz-96 "atmosphere" on coordinates `[n_forcing, dim)` whose local
    /// forcing is `forcing + coupling * x_f`, driven by slow forcing
    /// coordinates `[0, n_forcing)`. The forcing coordinates relax toward a
    /// seasonal cycle with timescale `relax_time` and carry red-noise
    /// anomalies of stationary standard deviation `anomaly_std`.
    Lorenz96Forced {
        forcing: f64,
        n_forcing: usize,
        coupling: f64,
        relax_time: f64,
        season_amplitude: f64,
        season_period_steps: usize,
        anomaly_std: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub dim: usize,
    pub dt: f64,
    pub substeps: usize,
}

impl SystemSpec {
    pub fn lorenz63() -> Self {
        Self {
            kind: SystemKind::Lorenz63 {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
            dim: 3,
            dt: 0.01,
            substeps: 2,
        }
    }

    pub fn lorenz96(dim: usize, forcing: f64) -> Self {
        Self {
            kind: SystemKind::Lorenz96 { forcing },
            dim,
            dt: 0.05,
            substeps: 2,
        }
    }

    pub fn lorenz96_forced(dim: usize, n_forcing: usize) -> Self {
        Self {
            kind: SystemKind::Lorenz96Forced {
                forcing: 8.0,
                n_forcing,
                coupling: 3.0,
                relax_time: 10.0,
                season_amplitude: 1.0,
                season_period_steps: 400,
                anomaly_std: 1.0,
            },
            dim,
            dt: 0.05,
            substeps: 2,
        }
    }

    /// Exact discretization of the Ornstein-Uhlenbeck process
    /// `dx = A x dt + B dW` at step `dt` (Van Loan's construction).
    pub fn ornstein_uhlenbeck(drift: &DMatrix<f64>, diffusion: &DMatrix<f64>, dt: f64) -> Result<Self> {
        let d = drift.nrows();
        if drift.ncols() != d || diffusion.nrows() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: drift.ncols(),
            });
        }
        let qc = diffusion * diffusion.transpose();
        let mut block = DMatrix::zeros(2 * d, 2 * d);
        block.view_mut((0, 0), (d, d)).copy_from(&(-drift));
        block.view_mut((0, d), (d, d)).copy_from(&qc);
        block.view_mut((d, d), (d, d)).copy_from(&drift.transpose());
        let e = (block * dt).exp();
        let f22 = e.view((d, d), (d, d)).into_owned();
        let g12 = e.view((0, d), (d, d)).into_owned();
        let transition = f22.transpose();
        let process_noise = linalg::symmetrize(&(&transition * g12));
        Ok(Self {
            kind: SystemKind::LinearGaussian {
                transition,
                process_noise,
            },
            dim: d,
            dt,
            substeps: 1,
        })
    }

    /// Seeded stable OU system: damped rotation plus a random coupling.
    pub fn random_stable_ou(dim: usize, dt: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "random-ou", &[]);
        let g = DMatrix::from_fn(dim, dim, |_, _| rng::normal(&mut r) / (dim as f64).sqrt());
        let skew = (&g - g.transpose()) * 1.0;
        let h = DMatrix::from_fn(dim, dim, |_, _| rng::normal(&mut r) / (dim as f64).sqrt());
        let drift = DMatrix::identity(dim, dim) * -0.5 + skew + h * 0.2;
        let diffusion = DMatrix::identity(dim, dim);
        let spec = Self::ornstein_uhlenbeck(&drift, &diffusion, dt)?;
        if let SystemKind::LinearGaussian { transition, .. } = &spec.kind {
            if linalg::spectral_radius(transition) >= 1.0 {
                return Err(Error::InvalidParameter("drawn OU drift is not stable".into()));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be at least 1".into()));
        }
        match &self.kind {
            SystemKind::LinearGaussian {
                transition,
                process_noise,
            } => {
                if transition.shape() != (self.dim, self.dim) || process_noise.shape() != (self.dim, self.dim) {
                    return Err(Error::InvalidParameter("linear-Gaussian matrices must be dim × dim".into()));
                }
            }
            SystemKind::Lorenz63 { .. } => Error::check_dim(3, self.dim)?,
            SystemKind::Lorenz96 { .. } => {
                if self.dim < 4 {
                    return Err(Error::InvalidParameter("Lorenz-96 needs dim ≥ 4".into()));
                }
            }
            SystemKind::Lorenz96Forced {
                n_forcing,
                relax_time,
                season_period_steps,
                ..
            } => {
                if *n_forcing == 0 || self.dim < n_forcing + 4 {
                    return Err(Error::InvalidParameter(
                        "forced Lorenz-96 needs ≥ 1 forcing and ≥ 4 atmosphere coordinates".into(),
                    ));
                }
                if *relax_time <= 0.0 || *season_period_steps == 0 {
                    return Err(Error::InvalidParameter("relax_time and season period must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Coordinates prescribed by external forcing (empty for unforced systems).
    pub fn forcing_indices(&self) -> Vec<usize> {
        match &self.kind {
            SystemKind::Lorenz96Forced { n_forcing, .. } => (0..*n_forcing).collect(),
            _ => Vec::new(),
        }
    }

    /// Seasonal cycle length in steps, if the system has one.
    pub fn season_period(&self) -> Option<usize> {
        match &self.kind {
            SystemKind::Lorenz96Forced {
                season_period_steps, ..
            } => Some(*season_period_steps),
            _ => None,
        }
    }

    /// Noise-free seasonal value of the forcing coordinates at a step.
    pub fn seasonal_forcing(&self, step: f64) -> Vec<f64> {
        match &self.kind {
            SystemKind::Lorenz96Forced {
                n_forcing,
                season_amplitude,
                season_period_steps,
                ..
            } => (0..*n_forcing)
                .map(|k| {
                    let phase = 2.0 * std::f64::consts::PI
                        * (step / *season_period_steps as f64 + k as f64 / *n_forcing as f64);
                    season_amplitude * phase.sin()
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// A representative starting state inside the attractor's basin.
    pub fn default_initial_state(&self) -> DVector<f64> {
        match &self.kind {
            SystemKind::LinearGaussian { .. } => DVector::zeros(self.dim),
            SystemKind::Lorenz63 { .. } => DVector::from_vec(vec![1.0, 1.0, 1.0]),
            SystemKind::Lorenz96 { forcing } => {
                let mut x = DVector::from_element(self.dim, *forcing);
                x[0] += 0.01;
                x
            }
            SystemKind::Lorenz96Forced { forcing, n_forcing, .. } => {
                let mut x = DVector::from_element(self.dim, *forcing);
                for k in 0..*n_forcing {
                    x[k] = 0.0;
                }
                x[*n_forcing] += 0.01;
                x
            }
        }
    }
}

fn lorenz96_tendency(x: &[f64], forcing: &dyn Fn(usize) -> f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ip1 = if i + 1 == n { 0 } else { i + 1 };
        let im1 = if i == 0 { n - 1 } else { i - 1 };
        let im2 = if i >= 2 { i - 2 } else { n + i - 2 };
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing(i);
    }
}

/// Deterministic part of the vector field at model time `t`.
fn tendency(kind: &SystemKind, t: f64, dt: f64, x: &[f64], out: &mut [f64]) {
    match kind {
        SystemKind::LinearGaussian { .. } => unreachable!("integrated exactly"),
        SystemKind::Lorenz63 { sigma, rho, beta } => {
            out[0] = sigma * (x[1] - x[0]);
            out[1] = x[0] * (rho - x[2]) - x[1];
            out[2] = x[0] * x[1] - beta * x[2];
        }
        SystemKind::Lorenz96 { forcing } => lorenz96_tendency(x, &|_| *forcing, out),
        SystemKind::Lorenz96Forced {
            forcing,
            n_forcing,
            coupling,
            relax_time,
            season_amplitude,
            season_period_steps,
            ..
        } => {
            let nf = *n_forcing;
            let na = x.len() - nf;
            let period = *season_period_steps as f64 * dt;
            for k in 0..nf {
                let phase = 2.0 * std::f64::consts::PI * (t / period + k as f64 / nf as f64);
                out[k] = (season_amplitude * phase.sin() - x[k]) / relax_time;
            }
            let (fx, ax) = x.split_at(nf);
            let local = |j: usize| forcing + coupling * fx[j * nf / na];
            lorenz96_tendency(ax, &local, &mut out[nf..]);
        }
    }
}

fn rk4_step(kind: &SystemKind, t: f64, dt: f64, h: f64, x: &mut [f64]) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    tendency(kind, t, dt, x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    tendency(kind, t + 0.5 * h, dt, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    tendency(kind, t + 0.5 * h, dt, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    tendency(kind, t + h, dt, &tmp, &mut k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Advances the truth system by one step of length `spec.dt`.
///
/// `step` is the global step index (it sets the seasonal phase of forced
/// systems); stochastic terms are drawn from the stream `(seed, step)`.
pub fn step_truth(x: &StateVector, spec: &SystemSpec, step: u64, seed: u64) -> Result<StateVector> {
    Error::check_dim(spec.dim, x.dim())?;
    let out = step_raw(x.values(), spec, step, seed);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            state: x.as_slice().to_vec(),
        });
    }
    StateVector::from_dvector(out)
}

pub(crate) fn step_raw(x: &DVector<f64>, spec: &SystemSpec, step: u64, seed: u64) -> DVector<f64> {
    match &spec.kind {
        SystemKind::LinearGaussian {
            transition,
            process_noise,
        } => {
            let mut r = rng::stream(seed, "truth-step", &[step]);
            let z = rng::normal_vector(&mut r, spec.dim);
            let l = linalg::psd_sqrt_factor(process_noise);
            transition * x + l * z
        }
        kind => {
            let mut buf = x.as_slice().to_vec();
            let h = spec.dt / spec.substeps as f64;
            let t0 = step as f64 * spec.dt;
            for s in 0..spec.substeps {
                rk4_step(kind, t0 + s as f64 * h, spec.dt, h, &mut buf);
            }
            if let SystemKind::Lorenz96Forced {
                n_forcing,
                relax_time,
                anomaly_std,
                ..
            } = kind
            {
                if *anomaly_std > 0.0 {
                    // Exact OU variance increment for the red-noise anomalies.
                    let mut r = rng::stream(seed, "truth-step", &[step]);
                    let decay = (-spec.dt / relax_time).exp();
                    let amp = anomaly_std * (1.0 - decay * decay).sqrt();
                    for v in buf.iter_mut().take(*n_forcing) {
                        *v += amp * rng::normal(&mut r);
                    }
                }
            }
            DVector::from_vec(buf)
        }
    }
}

/// Integrates `n_steps` from `x0` starting at global step `start_step`,
/// returning all `n_steps + 1` states.
pub fn simulate(spec: &SystemSpec, x0: &StateVector, start_step: u64, n_steps: usize, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..n_steps as u64 {
        x = step_truth(&x, spec, start_step + k, seed)?;
        states.push(x.clone());
    }
    Trajectory::new(states, spec.dt, start_step as f64 * spec.dt)
}

/// Long truth run: discards `n_spinup` steps, then keeps every `thin`-th
/// state. Sample `k` is the state at global step `n_spinup + k * thin`.
pub fn generate_dataset(spec: &SystemSpec, n_spinup: usize, n_samples: usize, thin: usize, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    if thin == 0 {
        return Err(Error::InvalidParameter("thin must be at least 1".into()));
    }
    let mut traj = Trajectory::empty(spec.dim, spec.dt * thin as f64);
    traj.t0 = n_spinup as f64 * spec.dt;
    if n_samples == 0 {
        return Ok(traj);
    }
    let mut x = StateVector::from_dvector(spec.default_initial_state())?;
    let mut step = 0u64;
    for _ in 0..n_spinup {
        x = step_truth(&x, spec, step, seed)?;
        step += 1;
    }
    for k in 0..n_samples {
        if k > 0 {
            for _ in 0..thin {
                x = step_truth(&x, spec, step, seed)?;
                step += 1;
            }
        }
        traj.push(x.clone())?;
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastKind {
    Perfect,
    ImperfectPhysics,
    LearnedMlp,
}

/// Residual network acting on normalized states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedMap {
    pub mlp: Mlp,
    pub normalizer: Climatology,
    pub loss_curve: Vec<f64>,
}

impl LearnedMap {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.normalizer.normalize_vec(x);
        let next = &z + self.mlp.forward(&z);
        self.normalizer.denormalize_vec(&next)
    }

    /// Jacobian of the one-step map in physical units.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len();
        let z = self.normalizer.normalize_vec(x);
        let mut jac = DMatrix::<f64>::identity(d, d);
        for i in 0..d {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            let row = self.mlp.vjp_input(&z, &e);
            for j in 0..d {
                jac[(i, j)] += row[j];
            }
        }
        // physical: D J D⁻¹
        DMatrix::from_fn(d, d, |i, j| {
            jac[(i, j)] * self.normalizer.std[i] / self.normalizer.std[j]
        })
    }
}

/// The forecasting model M that induces state transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub kind: ForecastKind,
    pub spec: Option<SystemSpec>,
    pub learned: Option<LearnedMap>,
    /// Systematic bias `b` added after every step.
    pub bias_injection: Option<DVector<f64>>,
}

/// Parameter perturbations that turn the truth system into an imperfect model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub forcing_delta: f64,
    /// Divides the number of integrator substeps (at least one remains).
    pub substep_divisor: usize,
    /// Replaces the forcing-coordinate relaxation time of forced systems.
    pub relax_time: Option<f64>,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            forcing_delta: 1.0,
            substep_divisor: 1,
            relax_time: None,
        }
    }
}

impl ForecastModel {
    pub fn perfect(spec: SystemSpec) -> Self {
        Self {
            kind: ForecastKind::Perfect,
            spec: Some(spec),
            learned: None,
            bias_injection: None,
        }
    }

    pub fn imperfect(truth: &SystemSpec, p: &Perturbation, bias: Option<DVector<f64>>) -> Result<Self> {
        let mut spec = truth.clone();
        spec.substeps = (spec.substeps / p.substep_divisor.max(1)).max(1);
        match &mut spec.kind {
            SystemKind::Lorenz96 { forcing } => *forcing += p.forcing_delta,
            SystemKind::Lorenz96Forced { forcing, relax_time, .. } => {
                *forcing += p.forcing_delta;
                if let Some(r) = p.relax_time {
                    *relax_time = r;
                }
            }
            SystemKind::Lorenz63 { rho, .. } => *rho += p.forcing_delta,
            SystemKind::LinearGaussian { .. } => {}
        }
        let m = Self {
            kind: ForecastKind::ImperfectPhysics,
            spec: Some(spec),
            learned: None,
            bias_injection: bias,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_bias(mut self, bias: DVector<f64>) -> Result<Self> {
        self.bias_injection = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match (&self.spec, &self.learned) {
            (Some(s), _) => s.dim,
            (None, Some(l)) => l.normalizer.dim(),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ForecastKind::LearnedMlp if self.learned.is_none() => {
                return Err(Error::InvalidParameter("learned forecaster requires weights".into()))
            }
            ForecastKind::Perfect | ForecastKind::ImperfectPhysics if self.spec.is_none() => {
                return Err(Error::InvalidParameter("physics forecaster requires a system spec".into()))
            }
            _ => {}
        }
        if let Some(b) = &self.bias_injection {
            Error::check_dim(self.dim(), b.len())?;
        }
        Ok(())
    }
}

/// Applies the forecaster `lead_steps` times starting at global step `start_step`.
pub fn forecast(x: &StateVector, m: &ForecastModel, start_step: u64, lead_steps: usize, seed: u64) -> Result<StateVector> {
    if lead_steps == 0 {
        return Err(Error::InvalidParameter("lead_steps must be at least 1".into()));
    }
    Error::check_dim(m.dim(), x.dim())?;
    let mut cur = x.values().clone();
    for k in 0..lead_steps as u64 {
        let step = start_step + k;
        cur = match (&m.kind, &m.spec, &m.learned) {
            (ForecastKind::LearnedMlp, _, Some(l)) => l.apply(&cur),
            (_, Some(spec), _) => step_raw(&cur, spec, step, seed),
            _ => return Err(Error::InvalidParameter("forecaster is incomplete".into())),
        };
        if let Some(b) = &m.bias_injection {
            cur += b;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                state: x.as_slice().to_vec(),
            });
        }
    }
    StateVector::from_dvector(cur)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterTraining {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ForecasterTraining {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            epochs: 100,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

/// Mean-squared one-step loss on normalized pairs and its gradient.
pub(crate) fn forecaster_loss_and_grad(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, Mlp) {
    let b = inputs.ncols() as f64;
    let acts = mlp.forward_batch(inputs.clone());
    let resid = acts.output() + inputs - targets;
    let loss = resid.norm_squared() / b;
    let (grads, _) = mlp.backward_batch(&acts, resid * (2.0 / b));
    (loss, grads)
}

/// Trains a residual MLP `z_{t+1} = z_t + f(z_t)` on consecutive snapshot pairs.
pub fn train_forecaster(data: &Trajectory, cfg: &ForecasterTraining) -> Result<ForecastModel> {
    if data.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: data.len(),
        });
    }
    let d = data.dim();
    let clim = fit_climatology(data, None)?;
    let n = data.len() - 1;
    let zs: Vec<DVector<f64>> = data.states().iter().map(|s| clim.normalize_vec(s.values())).collect();
    let inputs = DMatrix::from_fn(d, n, |i, j| zs[j][i]);
    let targets = DMatrix::from_fn(d, n, |i, j| zs[j + 1][i]);

    let mut sizes = vec![d];
    sizes.extend_from_slice(&cfg.hidden_sizes);
    sizes.push(d);
    let mut r = rng::stream(cfg.seed, "forecaster-train", &[]);
    let mut mlp = Mlp::new(&sizes, 0.1, &mut r);
    let mut adam = Adam::new(&mlp);
    let batch = cfg.batch.clamp(1, n);
    let per_epoch = n.div_ceil(batch);
    let total = cfg.epochs * per_epoch;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(forecaster_loss_and_grad(&mlp, &inputs, &targets).0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut it = 0;
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let xb = DMatrix::from_fn(d, chunk.len(), |i, j| inputs[(i, chunk[j])]);
            let yb = DMatrix::from_fn(d, chunk.len(), |i, j| targets[(i, chunk[j])]);
            let (loss, g) = forecaster_loss_and_grad(&mlp, &xb, &yb);
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    iteration: it,
                    last_loss: *curve.last().unwrap_or(&f64::NAN),
                });
            }
            adam.update(&mut mlp, &g, cosine_lr(cfg.lr, it, total));
            it += 1;
        }
        let full = forecaster_loss_and_grad(&mlp, &inputs, &targets).0;
        if !full.is_finite() {
            return Err(Error::NanLoss {
                iteration: it,
                last_loss: *curve.last().unwrap_or(&f64::NAN),
            });
        }
        curve.push(full);
    }
    Ok(ForecastModel {
        kind: ForecastKind::LearnedMlp,
        spec: None,
        learned: Some(LearnedMap {
            mlp,
            normalizer: clim,
            loss_curve: curve,
        }),
        bias_injection: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forecaster_loss_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, "fd", &[]);
        let mlp = Mlp::new(&[4, 6, 4], 0.5, &mut r);
        let x = DMatrix::from_fn(4, 7, |_, _| rng::normal(&mut r));
        let y = DMatrix::from_fn(4, 7, |_, _| rng::normal(&mut r));
        let (_, g) = forecaster_loss_and_grad(&mlp, &x, &y);
        let h = 1e-5;
        for i in 0..mlp.param_count() {
            let mut p = mlp.clone();
            p.set_param(i, mlp.param(i) + h);
            let up = forecaster_loss_and_grad(&p, &x, &y).0;
            p.set_param(i, mlp.param(i) - h);
            let down = forecaster_loss_and_grad(&p, &x, &y).0;
            let fd = (up - down) / (2.0 * h);
            let an = g.param(i);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "param {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn lorenz63_fixed_point_is_stationary() {
        let spec = SystemSpec::lorenz63();
        let c = 72f64.sqrt();
        let x = StateVector::new(vec![c, c, 27.0]).unwrap();
        let y = step_truth(&x, &spec, 0, 0).unwrap();
        for i in 0..3 {
            assert!((y.get(i) - x.get(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn forced_system_validates_dimensions() {
        let mut spec = SystemSpec::lorenz96_forced(8, 8);
        assert!(spec.validate().is_err());
        spec = SystemSpec::lorenz96_forced(12, 4);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.forcing_indices(), vec![0, 1, 2, 3]);
    }
}
