//! Small feed-forward networks with tanh hidden layers and an Adam optimizer.
//!
//! Batches are stored column-wise: each column of the input matrix is one
//! sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Cached layer activations from a batch forward pass.
pub struct Activations {
    /// `layers[0]` is the input; the last entry is the network output.
    pub layers: Vec<DMatrix<f64>>,
}

impl Activations {
    pub fn output(&self) -> &DMatrix<f64> {
        self.layers.last().expect("at least one layer")
    }
}

impl Mlp {
    /// LeCun-normal initialization; the output layer is scaled by `out_scale`.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut StreamRng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut scale = (1.0 / fan_in as f64).sqrt();
            if l == sizes.len() - 2 {
                scale *= out_scale;
            }
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| scale * rng::normal(rng)));
            biases.push(DVector::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.nrows()).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = b.clone();
            z.gemv(1.0, w, &a, 1.0);
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    pub fn forward_batch(&self, x: DMatrix<f64>) -> Activations {
        let last = self.weights.len() - 1;
        let mut layers = Vec::with_capacity(self.weights.len() + 1);
        layers.push(x);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * layers.last().expect("input present");
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            layers.push(z);
        }
        Activations { layers }
    }

    /// Parameter gradients for the loss whose output-gradient is `grad_out`.
    /// Also returns the gradient with respect to the network input.
    pub fn backward_batch(&self, acts: &Activations, grad_out: DMatrix<f64>) -> (Mlp, DMatrix<f64>) {
        let mut grads = self.zeros_like();
        let mut delta = grad_out;
        for l in (0..self.weights.len()).rev() {
            let input = &acts.layers[l];
            grads.weights[l] = &delta * input.transpose();
            grads.biases[l] = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            let mut back = self.weights[l].transpose() * &delta;
            if l > 0 {
                back.zip_apply(input, |g, a| *g *= 1.0 - a * a);
            }
            delta = back;
        }
        (grads, delta)
    }

    /// Vector-Jacobian product `(∂f/∂x)ᵀ v` at a single input.
    pub fn vjp_input(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = b.clone();
            z.gemv(1.0, w, &a, 1.0);
            if l < last {
                z.apply(|v| *v = v.tanh());
                acts.push(z.clone());
            }
            a = z;
        }
        let mut delta = v.clone();
        for l in (0..self.weights.len()).rev() {
            let mut back = self.weights[l].tr_mul(&delta);
            if l > 0 {
                back.zip_apply(&acts[l - 1], |g, a| *g *= 1.0 - a * a);
            }
            delta = back;
        }
        delta
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn locate(&self, mut i: usize) -> (bool, usize, usize) {
        for (l, w) in self.weights.iter().enumerate() {
            if i < w.len() {
                return (true, l, i);
            }
            i -= w.len();
            if i < self.biases[l].len() {
                return (false, l, i);
            }
            i -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (true, l, k) => self.weights[l].as_slice()[k],
            (false, l, k) => self.biases[l][k],
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        match self.locate(i) {
            (true, l, k) => self.weights[l].as_mut_slice()[k] = v,
            (false, l, k) => self.biases[l][k] = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .map(|w| w.as_mut_slice())
            .chain(self.biases.iter_mut().map(|b| b.as_mut_slice()))
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .map(|w| w.as_slice())
            .chain(self.biases.iter().map(|b| b.as_slice()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    pub fn new(like: &Mlp) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Mlp, grads: &Mlp, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine-annealed learning rate from `lr0` to zero over `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Mlp {
        let mut r = rng::stream(3, "nn-test", &[]);
        Mlp::new(&[3, 5, 4, 2], 1.0, &mut r)
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let mlp = net();
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let acts = mlp.forward_batch(x.clone());
        for j in 0..4 {
            let single = mlp.forward(&x.column(j).into_owned());
            for i in 0..2 {
                assert!((single[i] - acts.output()[(i, j)]).abs() < 1e-14);
            }
        }
    }

    fn loss(mlp: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let acts = mlp.forward_batch(x.clone());
        (acts.output() - y).norm_squared() * 0.5
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        let mlp = net();
        let x = DMatrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let y = DMatrix::from_fn(2, 5, |i, j| (i + j) as f64 * 0.1);
        let acts = mlp.forward_batch(x.clone());
        let (grads, gx) = mlp.backward_batch(&acts, acts.output() - &y);
        let h = 1e-5;
        for k in 0..mlp.param_count() {
            let mut p = mlp.clone();
            p.set_param(k, mlp.param(k) + h);
            let up = loss(&p, &x, &y);
            p.set_param(k, mlp.param(k) - h);
            let down = loss(&p, &x, &y);
            let fd = (up - down) / (2.0 * h);
            let an = grads.param(k);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6), "param {k}: {fd} vs {an}");
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[(i, 0)] += h;
            let mut xm = x.clone();
            xm[(i, 0)] -= h;
            let fd = (loss(&mlp, &xp, &y) - loss(&mlp, &xm, &y)) / (2.0 * h);
            assert!((fd - gx[(i, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn vjp_matches_batch_backward() {
        let mlp = net();
        let x = DVector::from_vec(vec![0.1, -0.3, 0.7]);
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let acts = mlp.forward_batch(DMatrix::from_column_slice(3, 1, x.as_slice()));
        let (_, gx) = mlp.backward_batch(&acts, DMatrix::from_column_slice(2, 1, v.as_slice()));
        let vjp = mlp.vjp_input(&x, &v);
        for i in 0..3 {
            assert!((vjp[i] - gx[(i, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut mlp = net();
        let x = DMatrix::from_fn(3, 8, |i, j| (i as f64 + 1.0) * (j as f64 - 3.5) * 0.1);
        let y = DMatrix::from_fn(2, 8, |i, j| (x[(0, j)] * (i as f64 + 1.0)).sin() * 0.5);
        let before = loss(&mlp, &x, &y);
        let mut adam = Adam::new(&mlp);
        for _ in 0..300 {
            let acts = mlp.forward_batch(x.clone());
            let (g, _) = mlp.backward_batch(&acts, acts.output() - &y);
            adam.update(&mut mlp, &g, 1e-2);
        }
        assert!(loss(&mlp, &x, &y) < 0.1 * before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }
}
