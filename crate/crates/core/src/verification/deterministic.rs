use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::StateVector;

/// Non-negative per-coordinate weights normalized to mean 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    weights: DVector<f64>,
}

impl WeightVector {
    pub fn uniform(dim: usize) -> Self {
        Self {
            weights: DVector::from_element(dim, 1.0),
        }
    }

    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("weights"));
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if mean <= 0.0 {
            return Err(Error::InvalidParameter("weights must not all be zero".into()));
        }
        Ok(Self {
            weights: DVector::from_iterator(raw.len(), raw.into_iter().map(|w| w / mean)),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub(crate) fn check(&self, dim: usize) -> Result<()> {
        Error::check_dim(self.dim(), dim)
    }
}

pub fn rmse(a: &StateVector, b: &StateVector, w: &WeightVector) -> Result<f64> {
    Error::check_dim(a.dim(), b.dim())?;
    w.check(a.dim())?;
    let s: f64 = (0..a.dim())
        .map(|i| w.weights[i] * (a.get(i) - b.get(i)).powi(2))
        .sum();
    Ok((s / a.dim() as f64).sqrt())
}

/// Weighted uncentered anomaly correlation; `None` when either field has zero norm.
pub fn acc(a_anom: &StateVector, b_anom: &StateVector, w: &WeightVector) -> Result<Option<f64>> {
    Error::check_dim(a_anom.dim(), b_anom.dim())?;
    w.check(a_anom.dim())?;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a_anom.dim() {
        let (x, y, wi) = (a_anom.get(i), b_anom.get(i), w.weights[i]);
        ab += wi * x * y;
        aa += wi * x * x;
        bb += wi * y * y;
    }
    if aa <= 0.0 || bb <= 0.0 {
        return Ok(None);
    }
    Ok(Some((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)))
}

/// Percentage change of `rmse_a` relative to `rmse_b`.
pub fn relative_improvement(rmse_a: f64, rmse_b: f64) -> Result<f64> {
    if rmse_b <= 0.0 {
        return Err(Error::Undefined("relative improvement against a zero baseline"));
    }
    Ok((rmse_a - rmse_b) / rmse_b * 100.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Average ranks (ties share the mean rank).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rmse_trivial_cases() {
        let w = WeightVector::uniform(3);
        let a = sv(&[1.0, 2.0, 3.0]);
        assert_eq!(rmse(&a, &a, &w).unwrap(), 0.0);
        let b = sv(&[1.5, 2.5, 3.5]);
        assert!((rmse(&a, &b, &w).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn acc_signs() {
        let w = WeightVector::uniform(3);
        let a = sv(&[1.0, -2.0, 0.5]);
        let neg = sv(&[-1.0, 2.0, -0.5]);
        assert!((acc(&a, &a, &w).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((acc(&a, &neg, &w).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(acc(&a, &StateVector::zeros(3), &w).unwrap(), None);
    }

    #[test]
    fn relative_improvement_cases() {
        assert_eq!(relative_improvement(1.0, 1.0).unwrap(), 0.0);
        assert!((relative_improvement(1.1, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((relative_improvement(0.9, 1.0).unwrap() + 10.0).abs() < 1e-12);
        assert!(relative_improvement(1.0, 0.0).is_err());
    }

    #[test]
    fn weights_normalized() {
        let w = WeightVector::new(vec![1.0, 3.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 1.5]);
        assert!(WeightVector::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn spearman_monotone() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 4.0, 9.0, 16.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
