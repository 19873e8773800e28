use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::score::{net_input, ScoreModel, TIME_FREQUENCIES};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Adam, Mlp};
use crate::rng;
use crate::state::{Climatology, Trajectory};

/// Weight `λ(σ)` applied to `‖s_θ + ε/σ‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Uniform,
    /// `λ = σ²`, i.e. plain ε-prediction error.
    SigmaSquared,
}

impl LossWeighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::SigmaSquared => sigma * sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTraining {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub weighting: LossWeighting,
    /// Lower end of the uniform `τ` draw.
    pub tau_min: f64,
}

impl Default for ScoreTraining {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![128, 128],
            epochs: 50,
            lr: 1e-3,
            batch: 128,
            seed: 0,
            weighting: LossWeighting::SigmaSquared,
            tau_min: 1e-3,
        }
    }
}

/// Per-sample denoising score-matching term `λ(σ) ‖s + ε/σ‖²`.
pub fn dsm_term(s: &DVector<f64>, eps: &DVector<f64>, sigma: f64, weighting: LossWeighting) -> f64 {
    weighting.weight(sigma) * (s + eps / sigma).norm_squared()
}

/// Mean DSM loss of any score model over fixed draws (columns of `x0`, `eps`).
pub fn dsm_loss_model(
    model: &ScoreModel,
    x0: &DMatrix<f64>,
    taus: &[f64],
    eps: &DMatrix<f64>,
    sched: &NoiseSchedule,
    weighting: LossWeighting,
) -> f64 {
    let b = x0.ncols();
    let d = x0.nrows() as f64;
    let mut total = 0.0;
    for j in 0..b {
        let lvl = sched.level_at(taus[j]);
        let e = eps.column(j).into_owned();
        let xt = x0.column(j) * lvl.alpha + &e * lvl.sigma;
        total += dsm_term(&model.score_level(&xt, &lvl), &e, lvl.sigma, weighting);
    }
    total / (b as f64 * d)
}

/// Mean DSM loss of a score network and its parameter gradient.
pub fn dsm_loss_and_grad(
    mlp: &Mlp,
    x0: &DMatrix<f64>,
    taus: &[f64],
    eps: &DMatrix<f64>,
    sched: &NoiseSchedule,
    weighting: LossWeighting,
) -> (f64, Mlp) {
    let d = x0.nrows();
    let b = x0.ncols();
    let mut inputs = DMatrix::zeros(d + 2 * TIME_FREQUENCIES, b);
    let mut xts = DMatrix::zeros(d, b);
    let mut levels = Vec::with_capacity(b);
    for j in 0..b {
        let lvl = sched.level_at(taus[j]);
        let xt = x0.column(j) * lvl.alpha + eps.column(j) * lvl.sigma;
        inputs.set_column(j, &net_input(&xt, lvl.tau));
        xts.set_column(j, &xt);
        levels.push(lvl);
    }
    let acts = mlp.forward_batch(inputs);
    let out = acts.output();
    let norm = 1.0 / (b * d) as f64;
    let mut loss = 0.0;
    let mut grad_out = DMatrix::zeros(d, b);
    for j in 0..b {
        let lvl = &levels[j];
        // s + ε/σ = (ε − ε̂)/σ with ε̂ = σ x_τ + net
        let w = weighting.weight(lvl.sigma) / (lvl.sigma * lvl.sigma);
        for i in 0..d {
            let r = lvl.sigma * xts[(i, j)] + out[(i, j)] - eps[(i, j)];
            loss += w * r * r * norm;
            grad_out[(i, j)] = 2.0 * w * r * norm;
        }
    }
    let (grads, _) = mlp.backward_batch(&acts, grad_out);
    (loss, grads)
}

/// Trains an MLP score network on `data` normalized by `clim`.
pub fn train_score(data: &Trajectory, clim: &Climatology, sched: &NoiseSchedule, cfg: &ScoreTraining) -> Result<ScoreModel> {
    if data.is_empty() {
        return Err(Error::Empty("score training data"));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::InvalidParameter("epochs and batch must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.tau_min) {
        return Err(Error::InvalidParameter("tau_min must lie in [0, 1)".into()));
    }
    let d = data.dim();
    Error::check_dim(d, clim.dim())?;
    let z: Vec<DVector<f64>> = data.states().iter().map(|s| clim.normalize_vec(s.values())).collect();
    let n = z.len();

    let mut sizes = vec![d + 2 * TIME_FREQUENCIES];
    sizes.extend_from_slice(&cfg.hidden_sizes);
    sizes.push(d);
    let mut r = rng::stream(cfg.seed, "score-train", &[]);
    let mut mlp = Mlp::new(&sizes, 0.1, &mut r);
    let mut adam = Adam::new(&mlp);
    let batch = cfg.batch.min(n);
    let per_epoch = n.div_ceil(batch);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut it = 0;
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let x0 = DMatrix::from_fn(d, chunk.len(), |i, j| z[chunk[j]][i]);
            let taus: Vec<f64> = (0..chunk.len()).map(|_| r.random_range(cfg.tau_min..=1.0)).collect();
            let eps = DMatrix::from_fn(d, chunk.len(), |_, _| rng::normal(&mut r));
            let (loss, g) = dsm_loss_and_grad(&mlp, &x0, &taus, &eps, sched, cfg.weighting);
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    iteration: it,
                    last_loss: curve.last().copied().unwrap_or(f64::NAN),
                });
            }
            adam.update(&mut mlp, &g, cosine_lr(cfg.lr, it, total));
            epoch_loss += loss * chunk.len() as f64;
            it += 1;
        }
        curve.push(epoch_loss / n as f64);
    }
    ScoreModel::from_net(mlp, clim.clone(), curve)
}
