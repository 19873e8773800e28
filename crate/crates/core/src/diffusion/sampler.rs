use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseLevel, NoiseSchedule};
use super::score::ScoreModel;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::state::{Ensemble, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    EulerMaruyamaSde,
    HeunPflowOde,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub n_steps: usize,
    /// DDIM stochasticity; 0 is deterministic, 1 matches ancestral sampling.
    pub eta: f64,
    pub churn: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::HeunPflowOde,
            n_steps: 100,
            eta: 0.0,
            churn: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > sched.n_steps {
            return Err(Error::InvalidParameter(format!(
                "sampler n_steps must lie in [1, {}], got {}",
                sched.n_steps, self.n_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter("eta must lie in [0, 1]".into()));
        }
        if !(self.churn >= 0.0 && self.churn.is_finite()) {
            return Err(Error::InvalidParameter("churn must be non-negative".into()));
        }
        Ok(())
    }
}

/// Descending schedule indices visited when denoising from `start_idx` to 0.
pub fn node_indices(sched: &NoiseSchedule, n_steps: usize, start_idx: usize) -> Vec<usize> {
    let n = sched.n_steps;
    let mut nodes = vec![start_idx];
    for j in (0..n_steps).rev() {
        let idx = ((j as f64) * n as f64 / n_steps as f64).round() as usize;
        if idx < *nodes.last().unwrap() {
            nodes.push(idx);
        }
    }
    if *nodes.last().unwrap() != 0 {
        nodes.push(0);
    }
    nodes
}

/// Hooks through which conditioning steers the reverse process.
pub trait Guidance: Sync {
    /// Extra term added to the model score at state `x`.
    fn score_correction(&self, _x: &DVector<f64>, _lvl: &NoiseLevel) -> Option<DVector<f64>> {
        None
    }

    /// Adjusts the state before a step is taken from level `lvl`.
    fn before_step(&self, _x: &mut DVector<f64>, _lvl: &NoiseLevel) {}

    /// Adjusts the state once it has reached level `lvl`.
    fn after_step(&self, _x: &mut DVector<f64>, _lvl: &NoiseLevel, _rng: &mut StreamRng) {}

    /// `(every, depth, rounds)` in node positions for time travel.
    fn travel(&self) -> Option<(usize, usize, usize)> {
        None
    }
}

/// No conditioning.
pub struct Unconditioned;

impl Guidance for Unconditioned {}

/// Forward VP transition from `from` to the noisier level `to`.
pub fn forward_transition(x: &DVector<f64>, from: &NoiseLevel, to: &NoiseLevel, rng: &mut StreamRng) -> DVector<f64> {
    let ratio = to.alpha / from.alpha;
    let var = (1.0 - ratio * ratio).max(0.0);
    let z = rng::normal_vector(rng, x.len());
    x * ratio + z * var.sqrt()
}

fn guided_score(model: &ScoreModel, guide: &dyn Guidance, x: &DVector<f64>, lvl: &NoiseLevel) -> DVector<f64> {
    let s = model.score_level(x, lvl);
    match guide.score_correction(x, lvl) {
        Some(c) => s + c,
        None => s,
    }
}

fn step(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guide: &dyn Guidance,
    x: &DVector<f64>,
    a_idx: usize,
    b_idx: usize,
    rng: &mut StreamRng,
) -> DVector<f64> {
    let mut la = sched.level(a_idx);
    let lb = sched.level(b_idx);
    let mut x = x.clone();
    if cfg.churn > 0.0 && cfg.method != SamplerMethod::Ddim {
        let tau_hat = (la.tau + cfg.churn * (la.tau - lb.tau)).min(1.0);
        let lh = sched.level_at(tau_hat);
        x = forward_transition(&x, &la, &lh, rng);
        la = lh;
    }
    guide.before_step(&mut x, &la);
    match cfg.method {
        SamplerMethod::EulerMaruyamaSde => {
            let beta = sched.beta(la.tau);
            let h = la.tau - lb.tau;
            let s = guided_score(model, guide, &x, &la);
            let mut next = &x + (&x * 0.5 + s) * (beta * h);
            if lb.sigma > 0.0 {
                next += rng::normal_vector(rng, x.len()) * (beta * h).sqrt();
            }
            next
        }
        SamplerMethod::HeunPflowOde => {
            let drift = |y: &DVector<f64>, l: &NoiseLevel| -> DVector<f64> {
                (y + guided_score(model, guide, y, l)) * (-0.5 * sched.beta(l.tau))
            };
            let h = lb.tau - la.tau;
            let d1 = drift(&x, &la);
            let euler = &x + &d1 * h;
            if lb.sigma > 0.0 {
                let d2 = drift(&euler, &lb);
                &x + (d1 + d2) * (0.5 * h)
            } else {
                euler
            }
        }
        SamplerMethod::Ddim => {
            let s = guided_score(model, guide, &x, &la);
            let a = la.alpha;
            let x0 = (&x + &s * (la.sigma * la.sigma)) / a;
            let eps = &s * (-la.sigma);
            if lb.sigma <= 0.0 {
                return x0;
            }
            let st = cfg.eta * (lb.sigma / la.sigma) * (1.0 - (a * a) / (lb.alpha * lb.alpha)).max(0.0).sqrt();
            let dir = (lb.sigma * lb.sigma - st * st).max(0.0).sqrt();
            let mut next = x0 * lb.alpha + eps * dir;
            if st > 0.0 {
                next += rng::normal_vector(rng, x.len()) * st;
            }
            next
        }
    }
}

/// Runs the reverse process along `nodes` (descending schedule indices),
/// applying guidance hooks and time travel. Works in model coordinates.
pub fn reverse_process(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guide: &dyn Guidance,
    x_start: DVector<f64>,
    nodes: &[usize],
    rng: &mut StreamRng,
) -> Result<DVector<f64>> {
    let mut x = x_start;
    let last = nodes.len().saturating_sub(1);
    let advance = |x: &DVector<f64>, pos: usize, rng: &mut StreamRng| -> Result<DVector<f64>> {
        let mut next = step(model, sched, cfg, guide, x, nodes[pos], nodes[pos + 1], rng);
        guide.after_step(&mut next, &sched.level(nodes[pos + 1]), rng);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reverse diffusion state"));
        }
        Ok(next)
    };
    for pos in 0..last {
        x = advance(&x, pos, rng)?;
        let reached = pos + 1;
        if let Some((every, depth, rounds)) = guide.travel() {
            if every > 0 && depth > 0 && reached % every == 0 && reached < last {
                let back = reached.saturating_sub(depth);
                for _ in 0..rounds {
                    x = forward_transition(&x, &sched.level(nodes[reached]), &sched.level(nodes[back]), rng);
                    for p in back..reached {
                        x = advance(&x, p, rng)?;
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Unconditional ensemble from the model prior, in system units.
pub fn sample(model: &ScoreModel, sched: &NoiseSchedule, cfg: &SamplerConfig, n: usize, seed: u64) -> Result<Ensemble> {
    sample_guided(model, sched, cfg, &Unconditioned, n, seed, "sample")
}

pub(crate) fn sample_guided(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    guide: &dyn Guidance,
    n: usize,
    seed: u64,
    tag: &str,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidParameter("ensemble size must be at least 1".into()));
    }
    model.validate()?;
    cfg.validate(sched)?;
    let nodes = node_indices(sched, cfg.n_steps, sched.n_steps);
    let members: Result<Vec<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, tag, &[i as u64]);
            let x = rng::normal_vector(&mut r, model.dim);
            reverse_process(model, sched, cfg, guide, x, &nodes, &mut r)
        })
        .collect();
    let states = members?
        .into_iter()
        .map(|z| StateVector::from_dvector(model.normalizer.denormalize_vec(&z)))
        .collect::<Result<Vec<_>>>()?;
    let seeds = (0..n as u64).map(|i| rng::derive(seed, tag, &[i])).collect();
    Ensemble::new(states, seeds)
}
