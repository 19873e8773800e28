//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vecs.set_column(col, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Solves `m x = b` for symmetric positive definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("spd_solve"))?;
    Ok(chol.solve(b))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("spd_inverse"))?;
    Ok(chol.inverse())
}

/// Lower Cholesky factor of a symmetric PSD matrix; eigenvalues below zero
/// are clipped so sample generation never fails on round-off.
pub fn psd_sqrt_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.l();
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let mut scaled = vecs.clone();
    for (j, v) in vals.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

/// Stationary covariance `P = A P Aᵀ + Q` by the doubling recursion.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if spectral_radius(a) >= 1.0 {
        return Err(Error::InvalidParameter(
            "transition has spectral radius ≥ 1; no stationary covariance".into(),
        ));
    }
    let mut p = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let next = &p + &ak * &p * ak.transpose();
        let delta = (&next - &p).norm();
        p = next;
        ak = &ak * &ak;
        if delta <= 1e-15 * p.norm().max(1.0) {
            return Ok(symmetrize(&p));
        }
    }
    Err(Error::InvalidParameter(
        "Lyapunov recursion did not converge; transition not stable".into(),
    ))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Sample mean and (population) covariance of column vectors.
pub fn sample_moments<'a, I>(vectors: I, dim: usize) -> (DVector<f64>, DMatrix<f64>)
where
    I: IntoIterator<Item = &'a DVector<f64>> + Clone,
{
    let mut mean = DVector::zeros(dim);
    let mut n = 0usize;
    for v in vectors.clone() {
        mean += v;
        n += 1;
    }
    mean /= n.max(1) as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in vectors {
        let c = v - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n.max(1) as f64;
    (mean, cov)
}
