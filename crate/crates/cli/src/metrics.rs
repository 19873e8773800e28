//! Metric CSV output and verification of stored ensemble series.

use gap_core::state::anomaly;
use gap_core::verification::{acc, crps_field, rmse, spread_skill_ratio, WeightVector};
use gap_core::{Climatology, Ensemble, StateVector, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::tensor::{Tensor, TensorMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub lead: i64,
    pub value: f64,
    pub member_count: usize,
    pub seed: u64,
}

pub fn csv_bytes(rows: &[MetricRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["metric", "lead", "value", "member_count", "seed"])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn parse_csv(bytes: &[u8]) -> CliResult<Vec<MetricRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Io(e.to_string()))
}

/// Ensembles stored as a rank-4 tensor `[cases, times, members, dim]`.
/// Element `(c, t)` verifies against truth index
/// `truth_start + c * case_spacing + time_offset + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSeries {
    pub tensor: Tensor,
    pub truth_start: usize,
    pub case_spacing: usize,
    pub time_offset: usize,
}

impl EnsembleSeries {
    pub fn new(cases: Vec<Vec<Ensemble>>, truth_start: usize, case_spacing: usize, time_offset: usize) -> CliResult<Self> {
        let parts = cases
            .iter()
            .map(|times| Tensor::stack(&times.iter().map(Tensor::from_ensemble).collect::<Vec<_>>()))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            tensor: Tensor::stack(&parts)?,
            truth_start,
            case_spacing,
            time_offset,
        })
    }

    pub fn from_tensor(tensor: Tensor, meta: &TensorMeta) -> CliResult<Self> {
        if tensor.rank() != 4 {
            return Err(CliError::Config(format!(
                "ensemble series must have rank 4, got shape {:?}",
                tensor.shape
            )));
        }
        let get = |k: &str| {
            meta.attrs
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| CliError::Config(format!("tensor {} lacks integer attribute {k}", meta.name)))
        };
        Ok(Self {
            truth_start: get("truth_start")?,
            case_spacing: get("case_spacing")?,
            time_offset: get("time_offset")?,
            tensor,
        })
    }

    pub fn attrs(&self) -> std::collections::BTreeMap<String, serde_json::Value> {
        crate::artifacts::attrs([
            ("truth_start", self.truth_start.into()),
            ("case_spacing", self.case_spacing.into()),
            ("time_offset", self.time_offset.into()),
        ])
    }

    pub fn n_cases(&self) -> usize {
        self.tensor.shape[0]
    }

    pub fn n_times(&self) -> usize {
        self.tensor.shape[1]
    }

    pub fn n_members(&self) -> usize {
        self.tensor.shape[2]
    }

    pub fn ensemble(&self, c: usize, t: usize) -> CliResult<Ensemble> {
        self.tensor.index(c).index(t).to_ensemble()
    }

    pub fn truth_index(&self, c: usize, t: usize) -> usize {
        self.truth_start + c * self.case_spacing + self.time_offset + t
    }

    /// Lead (or cycle time) reported for time slot `t`.
    pub fn lead(&self, t: usize) -> i64 {
        (self.time_offset + t) as i64
    }
}

fn subset(x: &[f64], coords: &[usize]) -> StateVector {
    StateVector::new(coords.iter().map(|&i| x[i]).collect()).expect("finite subset")
}

fn subset_ensemble(e: &Ensemble, coords: &[usize]) -> CliResult<Ensemble> {
    Ok(Ensemble::from_members(
        e.members().iter().map(|m| subset(m.as_slice(), coords)).collect(),
    )?)
}

/// Where the truth lives and how to form anomalies.
pub struct TruthContext<'a> {
    pub truth: &'a Trajectory,
    /// Global model step of `truth[0]`.
    pub truth_step: u64,
    pub clim: &'a Climatology,
    /// Coordinates entering the scores.
    pub coords: &'a [usize],
}

impl TruthContext<'_> {
    fn phase(&self, idx: usize) -> Option<usize> {
        self.clim
            .cycle_len()
            .map(|p| ((self.truth_step + idx as u64) % p as u64) as usize)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeriesScores {
    pub deterministic: Vec<MetricRow>,
    pub probabilistic: Vec<MetricRow>,
}

impl SeriesScores {
    pub fn mean_of(rows: &[MetricRow], metric: &str) -> f64 {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == metric && r.value.is_finite())
            .map(|r| r.value)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn values(rows: &[MetricRow], metric: &str) -> Vec<f64> {
        rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }
}

/// Case-averaged RMSE and ACC of the ensemble mean, CRPS and spread per
/// time slot, plus the spread-skill ratio across cases when it is defined.
pub fn score_series(series: &EnsembleSeries, tc: &TruthContext<'_>, prefix: &str, seed: u64) -> CliResult<SeriesScores> {
    let m = series.n_members();
    let k = tc.coords.len();
    let w = WeightVector::uniform(k);
    let last = series.truth_index(series.n_cases().saturating_sub(1), series.n_times().saturating_sub(1));
    if series.n_cases() > 0 && series.n_times() > 0 && last >= tc.truth.len() {
        return Err(CliError::Config(format!(
            "series needs truth index {last}, truth has {} states",
            tc.truth.len()
        )));
    }
    let row = |metric: &str, t: usize, value: f64| MetricRow {
        metric: format!("{prefix}{metric}"),
        lead: series.lead(t),
        value,
        member_count: m,
        seed,
    };
    let mut out = SeriesScores::default();
    for t in 0..series.n_times() {
        let (mut r_sum, mut a_sum, mut a_n, mut c_sum, mut s_sum) = (0.0, 0.0, 0usize, 0.0, 0.0);
        let mut ensembles = Vec::with_capacity(series.n_cases());
        let mut truths = Vec::with_capacity(series.n_cases());
        for c in 0..series.n_cases() {
            let idx = series.truth_index(c, t);
            let ens = series.ensemble(c, t)?;
            let truth_full = &tc.truth.states()[idx];
            let mean = StateVector::from_dvector(ens.mean())?;
            let phase = tc.phase(idx);
            let fa = anomaly(&mean, tc.clim, phase)?;
            let ta = anomaly(truth_full, tc.clim, phase)?;
            let sub_ens = subset_ensemble(&ens, tc.coords)?;
            let truth = subset(truth_full.as_slice(), tc.coords);
            r_sum += rmse(&subset(mean.as_slice(), tc.coords), &truth, &w)?;
            if let Some(v) = acc(&subset(fa.as_slice(), tc.coords), &subset(ta.as_slice(), tc.coords), &w)? {
                a_sum += v;
                a_n += 1;
            }
            c_sum += crps_field(&sub_ens, &truth, &w)?;
            if m > 1 {
                s_sum += (sub_ens.spread().map(|s| s * s).sum() / k as f64).sqrt();
            }
            ensembles.push(sub_ens);
            truths.push(truth);
        }
        let n = series.n_cases().max(1) as f64;
        out.deterministic.push(row("rmse", t, r_sum / n));
        out.deterministic
            .push(row("acc", t, if a_n > 0 { a_sum / a_n as f64 } else { f64::NAN }));
        out.probabilistic.push(row("crps", t, c_sum / n));
        if m > 1 {
            out.probabilistic.push(row("spread", t, s_sum / n));
            let ssr = spread_skill_ratio(&ensembles, &truths).unwrap_or(f64::NAN);
            out.probabilistic.push(row("ssr", t, ssr));
        }
    }
    Ok(out)
}
