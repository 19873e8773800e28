//! Verification metrics: deterministic, probabilistic, spectral and distributional.

mod deterministic;
mod eof;
mod index;
mod ks;
mod probabilistic;
mod spectral;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use deterministic::{acc, pearson, ranks, relative_improvement, rmse, spearman, WeightVector};
pub use eof::{canonical_sign, eof, EofResult};
pub use index::standardized_index;
pub use ks::{kolmogorov_q, ks_two_sample, KsResult};
pub use probabilistic::{crps, crps_field, crpss, spread_skill_ratio, spread_skill_ratio_scalar};
pub use spectral::{power_spectrum, spectrum_distance, Spectrum};

/// A named metric indexed by lead or time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub lead_or_time: Vec<i64>,
    pub values: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, lead: i64, value: f64) {
        self.lead_or_time.push(lead);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
