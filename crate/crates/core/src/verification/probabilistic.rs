use super::deterministic::WeightVector;
use crate::error::{Error, Result};
use crate::state::{Ensemble, StateVector};

/// Fair ensemble CRPS: `mean|x_m − y| − Σ_{m,k}|x_m − x_k| / (2M(M−1))`.
/// For a single member the spread term is zero and the score is the MAE.
pub fn crps(members: &[f64], truth: f64) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::Empty("ensemble"));
    }
    let skill = members.iter().map(|x| (x - truth).abs()).sum::<f64>() / m as f64;
    if m == 1 {
        return Ok(skill);
    }
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{m,k} |x_m − x_k| = 2 Σ_i (2i − M + 1) x_(i)
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m as f64 + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(skill - pair_sum / (2.0 * m as f64 * (m as f64 - 1.0)))
}

/// Weighted mean of the per-coordinate CRPS.
pub fn crps_field(ens: &Ensemble, truth: &StateVector, w: &WeightVector) -> Result<f64> {
    Error::check_dim(ens.dim(), truth.dim())?;
    w.check(truth.dim())?;
    let mut total = 0.0;
    for i in 0..truth.dim() {
        total += w.as_slice()[i] * crps(&ens.coordinate(i), truth.get(i))?;
    }
    Ok(total / truth.dim() as f64)
}

pub fn crpss(crps_fc: f64, crps_bench: f64) -> Result<f64> {
    if crps_bench <= 0.0 {
        return Err(Error::Undefined("CRPSS against a zero benchmark"));
    }
    Ok(1.0 - crps_fc / crps_bench)
}

/// Bias-corrected spread-skill ratio `sqrt(S² / (ε² − S²/M))` for scalar
/// ensembles `members[t]` verifying against `truths[t]`.
pub fn spread_skill_ratio_scalar(members: &[Vec<f64>], truths: &[f64]) -> Result<f64> {
    if members.len() != truths.len() {
        return Err(Error::DimMismatch {
            expected: truths.len(),
            found: members.len(),
        });
    }
    if members.is_empty() {
        return Err(Error::Empty("forecast times"));
    }
    let m = members[0].len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: m });
    }
    let mut s2 = 0.0;
    let mut e2 = 0.0;
    for (x, y) in members.iter().zip(truths) {
        if x.len() != m {
            return Err(Error::DimMismatch {
                expected: m,
                found: x.len(),
            });
        }
        let mu = x.iter().sum::<f64>() / m as f64;
        s2 += x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        e2 += (y - mu).powi(2);
    }
    let t = truths.len() as f64;
    s2 /= t;
    e2 /= t;
    if s2 == 0.0 {
        return Ok(0.0);
    }
    let denom = e2 - s2 / m as f64;
    if denom <= 0.0 {
        return Err(Error::Undefined("spread-skill ratio: non-positive corrected error"));
    }
    Ok((s2 / denom).sqrt())
}

/// Spread-skill ratio pooled over all coordinates and times.
pub fn spread_skill_ratio(ensembles: &[Ensemble], truths: &[StateVector]) -> Result<f64> {
    let mut members = Vec::new();
    let mut ys = Vec::new();
    if ensembles.len() != truths.len() {
        return Err(Error::DimMismatch {
            expected: truths.len(),
            found: ensembles.len(),
        });
    }
    for (e, y) in ensembles.iter().zip(truths) {
        Error::check_dim(e.dim(), y.dim())?;
        for i in 0..y.dim() {
            members.push(e.coordinate(i));
            ys.push(y.get(i));
        }
    }
    spread_skill_ratio_scalar(&members, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(members: &[f64], y: f64) -> f64 {
        let m = members.len() as f64;
        let skill: f64 = members.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
        let mut pairs = 0.0;
        for a in members {
            for b in members {
                pairs += (a - b).abs();
            }
        }
        skill - pairs / (2.0 * m * (m - 1.0))
    }

    #[test]
    fn crps_small_cases() {
        assert_eq!(crps(&[1.0, 1.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(crps(&[0.0, 2.0], 1.0).unwrap(), brute(&[0.0, 2.0], 1.0));
        assert_eq!(crps(&[0.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(crps(&[3.0], 1.0).unwrap(), 2.0);
        let xs = [0.3, -1.2, 2.5, 0.0, 0.7];
        assert!((crps(&xs, 0.4).unwrap() - brute(&xs, 0.4)).abs() < 1e-14);
        assert!(crps(&[], 0.0).is_err());
    }

    #[test]
    fn crpss_cases() {
        assert_eq!(crpss(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(crpss(0.0, 2.0).unwrap(), 1.0);
        assert_eq!(crpss(4.0, 2.0).unwrap(), -1.0);
    }

    #[test]
    fn ssr_hand_table() {
        // t1: members {0, 2}, truth 2; t2: members {1, 1}, truth 0
        // S² = ((2)+(0))/2 = 1; ε² = ((1)² + (1)²)/2 = 1; SSR = sqrt(1/(1 − 1/2))
        let members = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let r = spread_skill_ratio_scalar(&members, &[2.0, 0.0]).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        let flat = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(spread_skill_ratio_scalar(&flat, &[0.0, 0.0]).unwrap(), 0.0);
        let tight = vec![vec![0.0, 2.0]];
        assert!(spread_skill_ratio_scalar(&tight, &[1.0]).is_err());
    }
}
