use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EofResult {
    /// Orthonormal spatial patterns, leading first.
    pub patterns: Vec<DVector<f64>>,
    /// Fraction of total anomaly variance per mode.
    pub explained_variance: Vec<f64>,
    /// Anomaly variance carried by each mode (population convention).
    pub mode_variance: Vec<f64>,
    /// Principal-component series (projections of the anomalies).
    pub pcs: Vec<Vec<f64>>,
}

/// Flips `v` so that its largest-magnitude entry is positive.
pub fn canonical_sign(v: &mut DVector<f64>) {
    let k = v.iamax();
    if v[k] < 0.0 {
        v.neg_mut();
    }
}

/// Leading empirical orthogonal functions via SVD of the anomaly matrix.
pub fn eof(data: &Trajectory, n_modes: usize) -> Result<EofResult> {
    let t = data.len();
    let d = data.dim();
    if t <= n_modes {
        return Err(Error::TooFewSamples {
            needed: n_modes + 1,
            found: t,
        });
    }
    if n_modes == 0 || n_modes > d {
        return Err(Error::InvalidParameter(format!("n_modes must lie in [1, {d}]")));
    }
    let mut mean = DVector::zeros(d);
    for s in data.states() {
        mean += s.values();
    }
    mean /= t as f64;
    let x = DMatrix::from_fn(t, d, |r, c| data.states()[r].get(c) - mean[c]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::RankDeficient {
            requested: n_modes,
            rank: 0,
        });
    }
    let s0 = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .filter(|&&k| svd.singular_values[k] > 1e-10 * s0)
        .count();
    if rank < n_modes {
        return Err(Error::RankDeficient {
            requested: n_modes,
            rank,
        });
    }
    let mut out = EofResult {
        patterns: Vec::with_capacity(n_modes),
        explained_variance: Vec::with_capacity(n_modes),
        mode_variance: Vec::with_capacity(n_modes),
        pcs: Vec::with_capacity(n_modes),
    };
    for &k in order.iter().take(n_modes) {
        let mut v = vt.row(k).transpose();
        canonical_sign(&mut v);
        let pc = &x * &v;
        let s2 = svd.singular_values[k].powi(2);
        out.explained_variance.push(s2 / total);
        out.mode_variance.push(s2 / t as f64);
        out.pcs.push(pc.iter().copied().collect());
        out.patterns.push(v);
    }
    Ok(out)
}
