use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseLevel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::Mlp;
use crate::state::{Climatology, StateVector};

/// Floor on α in the one-step denoiser.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Ridge added to analytic covariances before factorization.
pub const COV_RIDGE: f64 = 1e-10;
/// Number of sinusoidal frequencies in the diffusion-time embedding.
pub const TIME_FREQUENCIES: usize = 8;
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Mlp,
    AnalyticGaussian,
}

/// Gaussian prior `N(μ, Σ)` with a cached eigendecomposition; eigenvalues are floored at the ridge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::DimMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        let sym = linalg::symmetrize(&cov);
        let (vals, vecs) = linalg::sym_eigen_desc(&sym);
        if vals.iter().any(|&v| v < -1e-9 * vals[0].abs().max(1.0)) {
            return Err(Error::NotPositiveDefinite("prior covariance"));
        }
        let eigvals = vals.map(|v| v.max(COV_RIDGE));
        Ok(Self {
            mean,
            cov: sym,
            eigvals,
            eigvecs: vecs,
        })
    }

    /// `V diag(f(λ)) Vᵀ y`.
    fn apply_spectral(&self, y: &DVector<f64>, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut c = self.eigvecs.tr_mul(y);
        for (ci, &l) in c.iter_mut().zip(self.eigvals.iter()) {
            *ci *= f(l);
        }
        &self.eigvecs * c
    }

    fn spectral_matrix(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.eigvecs.nrows(), self.eigvecs.ncols(), |i, j| {
            self.eigvecs[(i, j)] * f(self.eigvals[j])
        });
        scaled * self.eigvecs.transpose()
    }
}

/// Learned ε-predictor: `ε̂ = σ x + net([x, emb(τ)])`, `s = −ε̂/σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    pub mlp: Mlp,
    pub loss_curve: Vec<f64>,
}

/// Score approximation. All state arguments live in the model's
/// normalized coordinates; `normalizer` maps them to system units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub kind: ScoreKind,
    pub dim: usize,
    pub normalizer: Climatology,
    pub gaussian: Option<GaussianPrior>,
    pub net: Option<ScoreNet>,
}

pub fn time_embedding(tau: f64) -> [f64; 2 * TIME_FREQUENCIES] {
    let mut out = [0.0; 2 * TIME_FREQUENCIES];
    for k in 0..TIME_FREQUENCIES {
        let w = std::f64::consts::PI * 2f64.powf(0.75 * k as f64);
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    out
}

pub(crate) fn net_input(x: &DVector<f64>, tau: f64) -> DVector<f64> {
    let d = x.len();
    let emb = time_embedding(tau);
    DVector::from_fn(d + emb.len(), |i, _| if i < d { x[i] } else { emb[i - d] })
}

impl ScoreModel {
    /// Exact score of `N(μ, Σ)` in system units (identity normalizer).
    pub fn analytic_gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        Ok(Self {
            kind: ScoreKind::AnalyticGaussian,
            dim,
            normalizer: Climatology::identity(dim),
            gaussian: Some(GaussianPrior::new(mean, cov)?),
            net: None,
        })
    }

    /// Gaussian prior fitted to data in the coordinates of `normalizer`.
    pub fn gaussian_fit<'a, I>(states: I, normalizer: Climatology) -> Result<Self>
    where
        I: IntoIterator<Item = &'a StateVector>,
    {
        let dim = normalizer.dim();
        let z: Vec<DVector<f64>> = states.into_iter().map(|s| normalizer.normalize_vec(s.values())).collect();
        if z.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: z.len(),
            });
        }
        let (mean, cov) = linalg::sample_moments(z.iter(), dim);
        Ok(Self {
            kind: ScoreKind::AnalyticGaussian,
            dim,
            normalizer,
            gaussian: Some(GaussianPrior::new(mean, cov)?),
            net: None,
        })
    }

    pub fn from_net(mlp: Mlp, normalizer: Climatology, loss_curve: Vec<f64>) -> Result<Self> {
        let dim = normalizer.dim();
        if mlp.input_dim() != dim + 2 * TIME_FREQUENCIES || mlp.output_dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: mlp.output_dim(),
            });
        }
        Ok(Self {
            kind: ScoreKind::Mlp,
            dim,
            normalizer,
            gaussian: None,
            net: Some(ScoreNet { mlp, loss_curve }),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ScoreKind::Mlp => self.net.is_some() && self.gaussian.is_none(),
            ScoreKind::AnalyticGaussian => self.gaussian.is_some() && self.net.is_none(),
        };
        if !ok {
            return Err(Error::InvalidParameter("score model parameters do not match its kind".into()));
        }
        Error::check_dim(self.dim, self.normalizer.dim())
    }

    fn net_eps(&self, net: &ScoreNet, x: &DVector<f64>, lvl: &NoiseLevel) -> (DVector<f64>, f64) {
        let sigma = lvl.sigma.max(SIGMA_FLOOR);
        let n = net.mlp.forward(&net_input(x, lvl.tau));
        (x * lvl.sigma + n, sigma)
    }

    /// `∇ log p_τ(x)`.
    pub fn score_level(&self, x: &DVector<f64>, lvl: &NoiseLevel) -> DVector<f64> {
        match (&self.gaussian, &self.net) {
            (Some(g), _) => {
                let a = lvl.alpha;
                let s2 = lvl.sigma * lvl.sigma;
                let centered = x - &g.mean * a;
                -g.apply_spectral(&centered, |l| 1.0 / (a * a * l + s2))
            }
            (None, Some(net)) => {
                let (eps, sigma) = self.net_eps(net, x, lvl);
                -eps / sigma
            }
            _ => unreachable!("validated score model"),
        }
    }

    /// Tweedie posterior mean `E[x₀ | x_τ] = (x + σ² s) / α`.
    pub fn denoise_level(&self, x: &DVector<f64>, lvl: &NoiseLevel) -> DVector<f64> {
        match (&self.gaussian, &self.net) {
            (Some(_), _) if lvl.sigma == 0.0 => x.clone(),
            (Some(g), _) => {
                let a = lvl.alpha;
                let s2 = lvl.sigma * lvl.sigma;
                let centered = x - &g.mean * a;
                &g.mean + g.apply_spectral(&centered, |l| a * l / (a * a * l + s2))
            }
            (None, Some(net)) => {
                let n = net.mlp.forward(&net_input(x, lvl.tau));
                let a = lvl.alpha.max(ALPHA_FLOOR);
                (x * (1.0 - lvl.sigma * lvl.sigma) - n * lvl.sigma) / a
            }
            _ => unreachable!("validated score model"),
        }
    }

    /// `(∂F/∂x)ᵀ v` for the one-step denoiser `F`.
    pub fn denoise_vjp(&self, x: &DVector<f64>, lvl: &NoiseLevel, v: &DVector<f64>) -> DVector<f64> {
        match (&self.gaussian, &self.net) {
            (Some(g), _) => {
                let a = lvl.alpha;
                let s2 = lvl.sigma * lvl.sigma;
                g.apply_spectral(v, |l| a * l / (a * a * l + s2))
            }
            (None, Some(net)) => {
                let a = lvl.alpha.max(ALPHA_FLOOR);
                let full = net.mlp.vjp_input(&net_input(x, lvl.tau), v);
                let d = x.len();
                (v * (1.0 - lvl.sigma * lvl.sigma) - full.rows(0, d) * lvl.sigma) / a
            }
            _ => unreachable!("validated score model"),
        }
    }

    /// Block of the Tweedie covariance `Cov[x₀ | x_τ] = (σ²/α) ∂F/∂x`
    /// restricted to `idx`, symmetrized.
    pub fn posterior_cov_block(&self, x: &DVector<f64>, lvl: &NoiseLevel, idx: &[usize]) -> DMatrix<f64> {
        let k = idx.len();
        let a = lvl.alpha.max(ALPHA_FLOOR);
        let s2 = lvl.sigma * lvl.sigma;
        if let Some(g) = &self.gaussian {
            let full = g.spectral_matrix(|l| s2 * l / (lvl.alpha * lvl.alpha * l + s2));
            return DMatrix::from_fn(k, k, |i, j| full[(idx[i], idx[j])]);
        }
        let mut block = DMatrix::zeros(k, k);
        for (col, &j) in idx.iter().enumerate() {
            let mut e = DVector::zeros(self.dim);
            e[j] = 1.0;
            let row = self.denoise_vjp(x, lvl, &e);
            for (r, &i) in idx.iter().enumerate() {
                block[(col, r)] = row[i] * s2 / a;
            }
        }
        linalg::symmetrize(&block)
    }
}

/// Score at grid node `tau_idx` (model coordinates).
pub fn score(x_tau: &StateVector, tau_idx: usize, model: &ScoreModel, sched: &NoiseSchedule) -> Result<StateVector> {
    sched.check_index(tau_idx)?;
    Error::check_dim(model.dim, x_tau.dim())?;
    StateVector::from_dvector(model.score_level(x_tau.values(), &sched.level(tau_idx)))
}

/// One-step denoiser `F_τ` at grid node `tau_idx` (model coordinates).
pub fn denoise_one_step(x_tau: &StateVector, tau_idx: usize, model: &ScoreModel, sched: &NoiseSchedule) -> Result<StateVector> {
    sched.check_index(tau_idx)?;
    Error::check_dim(model.dim, x_tau.dim())?;
    StateVector::from_dvector(model.denoise_level(x_tau.values(), &sched.level(tau_idx)))
}
