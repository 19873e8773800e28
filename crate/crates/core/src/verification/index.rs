use crate::error::{Error, Result};

/// `scale · (diff − mean(diff)) / std(diff)` with `diff = a − b` (population std).
pub fn standardized_index(series_a: &[f64], series_b: &[f64], scale: f64) -> Result<Vec<f64>> {
    if series_a.len() != series_b.len() {
        return Err(Error::DimMismatch {
            expected: series_a.len(),
            found: series_b.len(),
        });
    }
    if series_a.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: series_a.len(),
        });
    }
    let diff: Vec<f64> = series_a.iter().zip(series_b).map(|(a, b)| a - b).collect();
    let n = diff.len() as f64;
    let mean = diff.iter().sum::<f64>() / n;
    let var = diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::ZeroVariance("index difference series"));
    }
    let sd = var.sqrt();
    Ok(diff.iter().map(|v| scale * (v - mean) / sd).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_rejected() {
        assert!(standardized_index(&[1.0, 2.0], &[1.0, 2.0], 10.0).is_err());
    }

    #[test]
    fn one_std_maps_to_scale() {
        // diff = {−1, 1}: mean 0, std 1
        let out = standardized_index(&[0.0, 2.0], &[1.0, 1.0], 10.0).unwrap();
        assert_eq!(out, vec![-10.0, 10.0]);
    }
}
