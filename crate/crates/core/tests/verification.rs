use gap_core::rng;
use gap_core::verification::{
    acc, crps, crps_field, eof, ks_two_sample, power_spectrum, rmse, spread_skill_ratio, spread_skill_ratio_scalar,
    standardized_index, WeightVector,
};
use gap_core::{Ensemble, StateVector, Trajectory};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn sv(v: Vec<f64>) -> StateVector {
    StateVector::new(v).unwrap()
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "test-normals", &[]);
    (0..n).map(|_| rng::normal(&mut r)).collect()
}

fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "test-uniforms", &[]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

#[test]
fn weighted_rmse_matches_direct_formula() {
    let a = normals(17, 1);
    let b = normals(17, 2);
    let raw = uniforms(17, 3);
    let w = WeightVector::new(raw.clone()).unwrap();
    let mean_w = raw.iter().sum::<f64>() / 17.0;
    let direct = ((0..17).map(|i| raw[i] / mean_w * (a[i] - b[i]).powi(2)).sum::<f64>() / 17.0).sqrt();
    let got = rmse(&sv(a.clone()), &sv(b), &w).unwrap();
    assert!((got - direct).abs() < 1e-12);
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.7).collect();
    assert!((rmse(&sv(a), &sv(shifted), &WeightVector::uniform(17)).unwrap() - 0.7).abs() < 1e-12);
    assert!((w.as_slice().iter().sum::<f64>() / 17.0 - 1.0).abs() < 1e-12);
}

#[test]
fn acc_of_orthogonalized_fields_is_zero() {
    let raw = uniforms(12, 4);
    let w = WeightVector::new(raw).unwrap();
    let ws = w.as_slice();
    let a = normals(12, 5);
    let mut b = normals(12, 6);
    let dot = |x: &[f64], y: &[f64]| (0..12).map(|i| ws[i] * x[i] * y[i]).sum::<f64>();
    let c = dot(&a, &b) / dot(&a, &a);
    for i in 0..12 {
        b[i] -= c * a[i];
    }
    let r = acc(&sv(a.clone()), &sv(b), &w).unwrap().unwrap();
    assert!(r.abs() < 1e-12);
    assert!((acc(&sv(a.clone()), &sv(a.clone()), &w).unwrap().unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((acc(&sv(a), &sv(neg), &w).unwrap().unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(acc(&sv(vec![0.0; 12]), &sv(normals(12, 7)), &w).unwrap(), None);
}

fn crps_brute_force(x: &[f64], y: f64) -> f64 {
    let m = x.len() as f64;
    let skill = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
    let mut pairs = 0.0;
    for a in x {
        for b in x {
            pairs += (a - b).abs();
        }
    }
    skill - pairs / (2.0 * m * (m - 1.0))
}

fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    let n = Normal::standard();
    sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

#[test]
fn crps_matches_pair_enumeration() {
    assert!((crps(&[0.0, 2.0], 1.0).unwrap() - crps_brute_force(&[0.0, 2.0], 1.0)).abs() < 1e-15);
    for seed in 0..10 {
        let x = normals(3 + seed as usize * 5, 100 + seed);
        let y = 0.3 * seed as f64 - 1.0;
        assert!((crps(&x, y).unwrap() - crps_brute_force(&x, y)).abs() < 1e-12);
    }
    assert_eq!(crps(&[1.5; 7], 1.5).unwrap(), 0.0);
    assert!(crps(&[], 0.0).is_err());
}

#[test]
fn large_gaussian_ensemble_matches_closed_form() {
    let (mu, sigma, m) = (0.4, 1.7, 4096);
    let n = Normal::standard();
    // Stratified members: one per equal-probability bin of N(mu, sigma).
    let strat: Vec<f64> = (0..m)
        .map(|k| mu + sigma * n.inverse_cdf((k as f64 + 0.5) / m as f64))
        .collect();
    for (k, y) in [-2.0, 0.0, 0.4, 3.5].into_iter().enumerate() {
        let exact = gaussian_crps(mu, sigma, y);
        let rel = (crps(&strat, y).unwrap() - exact).abs() / exact;
        assert!(rel < 0.02, "truth {y}: relative error {rel}");

        // Random draws agree within four standard errors of the skill term.
        let x: Vec<f64> = normals(m, 200 + k as u64).iter().map(|z| mu + sigma * z).collect();
        let abs: Vec<f64> = x.iter().map(|v| (v - y).abs()).collect();
        let mean_abs = abs.iter().sum::<f64>() / m as f64;
        let se = (abs.iter().map(|v| (v - mean_abs).powi(2)).sum::<f64>() / (m as f64 * (m - 1) as f64)).sqrt();
        assert!((crps(&x, y).unwrap() - exact).abs() < 4.0 * se, "truth {y}: random ensemble");
    }
}

#[test]
fn fair_crps_is_unbiased_in_ensemble_size() {
    let (mu, sigma, y) = (0.0, 1.0, 0.8);
    let big: Vec<f64> = normals(4096, 300).iter().map(|z| mu + sigma * z).collect();
    let reference = crps(&big, y).unwrap();
    let small: f64 = (0..1000)
        .map(|k| crps(&normals(8, 1000 + k), y).unwrap())
        .sum::<f64>()
        / 1000.0;
    assert!((small - reference).abs() / reference < 0.02, "{small} vs {reference}");
}

#[test]
fn spread_skill_ratio_of_reliable_ensemble_is_one() {
    let (m, t) = (32, 2000);
    let members: Vec<Vec<f64>> = (0..t).map(|k| normals(m, 10_000 + k as u64)).collect();
    let truths = normals(t, 7);
    let ssr = spread_skill_ratio_scalar(&members, &truths).unwrap();
    assert!((0.93..=1.07).contains(&ssr), "{ssr}");

    let flat: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0; 4]).collect();
    assert_eq!(spread_skill_ratio_scalar(&flat, &normals(10, 8)).unwrap(), 0.0);
}

#[test]
fn field_spread_skill_ratio_pools_coordinates() {
    let ens: Vec<Ensemble> = (0..200)
        .map(|k| {
            let members = (0..16).map(|j| sv(normals(5, 50_000 + k * 16 + j))).collect();
            Ensemble::from_members(members).unwrap()
        })
        .collect();
    let truths: Vec<StateVector> = (0..200).map(|k| sv(normals(5, 90_000 + k))).collect();
    let ssr = spread_skill_ratio(&ens, &truths).unwrap();
    assert!((0.93..=1.07).contains(&ssr), "{ssr}");
}

#[test]
fn ks_rejection_rate_is_calibrated() {
    let rejected = (0..1000u64)
        .filter(|&k| ks_two_sample(&uniforms(100, 2 * k), &uniforms(100, 2 * k + 1)).unwrap().p_value < 0.05)
        .count();
    let rate = rejected as f64 / 1000.0;
    assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
}

#[test]
fn ks_extremes() {
    let x = uniforms(50, 1);
    let same = ks_two_sample(&x, &x).unwrap();
    assert_eq!(same.statistic, 0.0);
    let shifted: Vec<f64> = x.iter().map(|v| v + 2.0).collect();
    assert_eq!(ks_two_sample(&x, &shifted).unwrap().statistic, 1.0);
}

#[test]
fn spectra_satisfy_parseval() {
    for (k, l) in [8usize, 9, 40, 64, 101].into_iter().enumerate() {
        let f = normals(l, 400 + k as u64);
        let s = power_spectrum(&f, 2.5).unwrap();
        let direct = 2.5 / l as f64 * f.iter().map(|v| v * v).sum::<f64>();
        let total: f64 = s.energy.iter().sum();
        assert!((total - direct).abs() < 1e-10 * direct, "L = {l}");
        assert!(s.parseval_residual < 1e-10);
    }
    let wave: Vec<f64> = (0..40)
        .map(|j| (2.0 * std::f64::consts::PI * 3.0 * j as f64 / 40.0).cos())
        .collect();
    let s = power_spectrum(&wave, 40.0).unwrap();
    for (k, e) in s.energy.iter().enumerate() {
        if k == 3 {
            assert!((e - 20.0).abs() < 1e-10);
        } else {
            assert!(*e < 1e-20, "mode {k}: {e}");
        }
    }
    assert!(power_spectrum(&[1.0], 1.0).is_err());
}

fn traj(rows: Vec<Vec<f64>>) -> Trajectory {
    Trajectory::new(rows.into_iter().map(sv).collect(), 1.0, 0.0).unwrap()
}

#[test]
fn eof_of_rank_one_data() {
    let v = DVector::from_vec(vec![0.5, -0.5, 0.5, 0.5]);
    let mean = [1.0, 2.0, 3.0, 4.0];
    let amps = normals(200, 9);
    let data = traj(amps.iter().map(|a| (0..4).map(|i| mean[i] + a * v[i]).collect()).collect());
    let r = eof(&data, 1).unwrap();
    assert!((r.patterns[0].dot(&v).abs() - 1.0).abs() < 1e-12);
    assert!((r.explained_variance[0] - 1.0).abs() < 1e-12);
    assert!(eof(&data, 2).is_err());
}

#[test]
fn eof_matches_covariance_eigenvectors() {
    let d = 20;
    let mut r = rng::stream(11, "test-mix", &[]);
    let mix = DMatrix::from_fn(d, d, |i, j| rng::normal(&mut r) / (1.0 + (i + j) as f64));
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|k| (&mix * DVector::from_vec(normals(d, 600 + k))).iter().copied().collect())
        .collect();
    let data = traj(rows.clone());
    let res = eof(&data, 5).unwrap();

    let n = rows.len() as f64;
    let mean = DVector::from_fn(d, |i, _| rows.iter().map(|x| x[i]).sum::<f64>() / n);
    let mut cov = DMatrix::zeros(d, d);
    for x in &rows {
        let a = DVector::from_column_slice(x) - &mean;
        cov += &a * a.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (k, &j) in order.iter().take(5).enumerate() {
        let v = eig.eigenvectors.column(j);
        let sign = v.dot(&res.patterns[k]).signum();
        assert!((&res.patterns[k] - v * sign).amax() < 1e-8, "mode {k}");
        assert!((res.mode_variance[k] - eig.eigenvalues[j]).abs() < 1e-8 * eig.eigenvalues[j]);
        assert!((res.explained_variance[k] - eig.eigenvalues[j] / cov.trace()).abs() < 1e-10);
        let p = &res.patterns[k];
        assert!(p[p.iamax()] > 0.0);
    }
    for w in res.explained_variance.windows(2) {
        assert!(w[0] >= w[1]);
    }
    for a in 0..5 {
        for b in 0..5 {
            let expected = if a == b { 1.0 } else { 0.0 };
            assert!((res.patterns[a].dot(&res.patterns[b]) - expected).abs() < 1e-12);
        }
    }
    // Principal components are anomaly projections.
    let x0 = DVector::from_column_slice(&rows[17]) - &mean;
    assert!((res.pcs[0][17] - x0.dot(&res.patterns[0])).abs() < 1e-10);
}

#[test]
fn eof_of_isotropic_data_has_flat_spectrum() {
    let data = traj((0..10_000).map(|k| normals(5, 700_000 + k)).collect());
    let r = eof(&data, 5).unwrap();
    let max = r.mode_variance[0];
    let min = r.mode_variance[4];
    assert!(max / min < 1.1, "{:?}", r.mode_variance);
}

#[test]
fn standardized_index_has_unit_scale() {
    let a = normals(300, 1);
    let b = normals(300, 2);
    let idx = standardized_index(&a, &b, 10.0).unwrap();
    let n = idx.len() as f64;
    let mean = idx.iter().sum::<f64>() / n;
    let sd = (idx.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-9);
    assert!((sd - 10.0).abs() < 1e-9);
    assert!(standardized_index(&a, &a, 10.0).is_err());
}

fn permute(v: &[f64], p: &[usize]) -> Vec<f64> {
    p.iter().map(|&i| v[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_permutation_invariant(
        seed in 0u64..10_000,
        perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let a = normals(9, seed);
        let b = normals(9, seed + 1);
        let raw = uniforms(9, seed + 2);
        let w = WeightVector::new(raw.clone()).unwrap();
        let wp = WeightVector::new(permute(&raw, &perm)).unwrap();
        let (ap, bp) = (permute(&a, &perm), permute(&b, &perm));
        let r1 = rmse(&sv(a.clone()), &sv(b.clone()), &w).unwrap();
        let r2 = rmse(&sv(ap.clone()), &sv(bp.clone()), &wp).unwrap();
        prop_assert!((r1 - r2).abs() < 1e-12);
        let c1 = acc(&sv(a.clone()), &sv(b.clone()), &w).unwrap().unwrap();
        let c2 = acc(&sv(ap.clone()), &sv(bp.clone()), &wp).unwrap().unwrap();
        prop_assert!((c1 - c2).abs() < 1e-12);

        let members: Vec<Vec<f64>> = (0..6).map(|k| normals(9, seed + 10 + k)).collect();
        let e1 = Ensemble::from_members(members.iter().map(|m| sv(m.clone())).collect()).unwrap();
        let e2 = Ensemble::from_members(members.iter().map(|m| sv(permute(m, &perm))).collect()).unwrap();
        let f1 = crps_field(&e1, &sv(a.clone()), &w).unwrap();
        let f2 = crps_field(&e2, &sv(ap), &wp).unwrap();
        prop_assert!((f1 - f2).abs() < 1e-12);
    }

    #[test]
    fn acc_is_scale_invariant_and_antisymmetric(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let a = normals(11, seed);
        let b = normals(11, seed + 1);
        let w = WeightVector::uniform(11);
        let base = acc(&sv(a.clone()), &sv(b.clone()), &w).unwrap().unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
        prop_assert!((acc(&sv(sa), &sv(sb), &w).unwrap().unwrap() - base).abs() < 1e-12);
        let nb: Vec<f64> = b.iter().map(|v| -v).collect();
        prop_assert!((acc(&sv(a), &sv(nb), &w).unwrap().unwrap() + base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}
