use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// `S_k` for `k = 0..=L/2`.
    pub energy: Vec<f64>,
    /// `|(C/L)Σ f_l² − Σ S_k|` relative to the field energy.
    pub parseval_residual: f64,
}

/// Energy spectrum of a periodic field sampled at `L` points over a domain of
/// length `C`, with `F_k = (1/L) Σ f_l e^{−2πikl/L}`, `S_0 = C|F_0|²` and
/// `S_k = 2C|F_k|²`. For even `L` the Nyquist mode has no mirror partner
/// and is counted once so that the energies sum exactly.
pub fn power_spectrum(field: &[f64], domain_length: f64) -> Result<Spectrum> {
    let l = field.len();
    if l < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: l });
    }
    if !(domain_length > 0.0) {
        return Err(Error::InvalidParameter("domain length must be positive".into()));
    }
    let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(l).process(&mut buf);
    let c = domain_length;
    let energy: Vec<f64> = (0..=l / 2)
        .map(|k| {
            let p = (buf[k] / l as f64).norm_sqr();
            if k == 0 || (l % 2 == 0 && k == l / 2) {
                c * p
            } else {
                2.0 * c * p
            }
        })
        .collect();
    let direct = c / l as f64 * field.iter().map(|v| v * v).sum::<f64>();
    let total: f64 = energy.iter().sum();
    let parseval_residual = (direct - total).abs() / direct.max(f64::MIN_POSITIVE);
    Ok(Spectrum {
        energy,
        parseval_residual,
    })
}

/// Mean absolute log-ratio between two spectra (modes with zero energy skipped).
pub fn spectrum_distance(a: &Spectrum, b: &Spectrum) -> f64 {
    let terms: Vec<f64> = a
        .energy
        .iter()
        .zip(&b.energy)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x / y).ln().abs())
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_mean_mode() {
        let s = power_spectrum(&[2.0; 8], 3.0).unwrap();
        assert!((s.energy[0] - 12.0).abs() < 1e-12);
        assert!(s.energy[1..].iter().all(|e| *e < 1e-20));
    }

    #[test]
    fn pure_wave_is_single_mode() {
        let l = 16;
        let f: Vec<f64> = (0..l)
            .map(|j| (2.0 * std::f64::consts::PI * 3.0 * j as f64 / l as f64).cos())
            .collect();
        let s = power_spectrum(&f, 1.0).unwrap();
        for (k, e) in s.energy.iter().enumerate() {
            if k == 3 {
                assert!((e - 0.5).abs() < 1e-12);
            } else {
                assert!(*e < 1e-20, "k={k} e={e}");
            }
        }
    }

    #[test]
    fn parseval_odd_and_even() {
        for l in [7usize, 8, 40] {
            let f: Vec<f64> = (0..l).map(|j| ((j * j) as f64 * 0.37).sin() + 0.2).collect();
            assert!(power_spectrum(&f, 2.5).unwrap().parseval_residual < 1e-12);
        }
        assert!(power_spectrum(&[1.0], 1.0).is_err());
    }
}
