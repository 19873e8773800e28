//! State containers, climatological statistics and normalization.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-coordinate climatological standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A finite system state of fixed dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    values: DVector<f64>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_dvector(DVector::from_vec(values))
    }

    pub fn from_dvector(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("state vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Uniformly spaced sequence of states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<StateVector>,
    dim: usize,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<StateVector>, dt: f64, t0: f64) -> Result<Self> {
        let dim = states.first().map(|s| s.dim()).unwrap_or(0);
        Self::with_dim(states, dim, dt, t0)
    }

    pub fn with_dim(states: Vec<StateVector>, dim: usize, dt: f64, t0: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        for s in &states {
            Error::check_dim(dim, s.dim())?;
        }
        Ok(Self { states, dim, dt, t0 })
    }

    pub fn empty(dim: usize, dt: f64) -> Self {
        Self {
            states: Vec::new(),
            dim,
            dt,
            t0: 0.0,
        }
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> Option<&StateVector> {
        self.states.get(i)
    }

    pub fn push(&mut self, s: StateVector) -> Result<()> {
        if self.states.is_empty() && self.dim == 0 {
            self.dim = s.dim();
        }
        Error::check_dim(self.dim, s.dim())?;
        self.states.push(s);
        Ok(())
    }

    /// Row-major `len × dim` copy of the data.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.as_slice().iter().copied()).collect()
    }

    pub fn from_row_major(data: &[f64], dim: usize, dt: f64, t0: f64) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "buffer of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let states = data
            .chunks(dim)
            .map(|c| StateVector::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_dim(states, dim, dt, t0)
    }

    /// Sub-trajectory restricted to the given coordinates.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.dim {
                return Err(Error::IndexOutOfRange { index: i, len: self.dim });
            }
        }
        let states = self
            .states
            .iter()
            .map(|s| StateVector {
                values: DVector::from_iterator(indices.len(), indices.iter().map(|&i| s.get(i))),
            })
            .collect();
        Ok(Self {
            states,
            dim: indices.len(),
            dt: self.dt,
            t0: self.t0,
        })
    }
}

/// A collection of ensemble members with their generating seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<StateVector>,
    member_seeds: Vec<u64>,
}

impl Ensemble {
    pub fn new(members: Vec<StateVector>, member_seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        Error::check_dim(members.len(), member_seeds.len())?;
        let dim = members[0].dim();
        for m in &members {
            Error::check_dim(dim, m.dim())?;
        }
        let mut sorted = member_seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("member seeds must be unique".into()));
        }
        Ok(Self {
            members,
            member_seeds,
        })
    }

    /// Members labelled with their index as seed.
    pub fn from_members(members: Vec<StateVector>) -> Result<Self> {
        let seeds = (0..members.len() as u64).collect();
        Self::new(members, seeds)
    }

    pub fn members(&self) -> &[StateVector] {
        &self.members
    }

    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for s in &self.members {
            m += s.values();
        }
        m / self.size() as f64
    }

    /// Per-coordinate unbiased ensemble standard deviation (zero for M = 1).
    pub fn spread(&self) -> DVector<f64> {
        let m = self.size();
        if m < 2 {
            return DVector::zeros(self.dim());
        }
        let mean = self.mean();
        let mut var = DVector::zeros(self.dim());
        for s in &self.members {
            let d = s.values() - &mean;
            var += d.component_mul(&d);
        }
        (var / (m - 1) as f64).map(f64::sqrt)
    }

    /// Values of coordinate `i` across members.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.members.iter().map(|s| s.get(i)).collect()
    }
}

/// Per-coordinate climatological statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub per_phase_mean: Option<Vec<DVector<f64>>>,
    pub sample_count: usize,
    /// Coordinates whose standard deviation was raised to [`STD_FLOOR`].
    pub floored: Vec<usize>,
}

impl Climatology {
    /// Zero mean, unit standard deviation: normalization is the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
            per_phase_mean: None,
            sample_count: 0,
            floored: Vec::new(),
        }
    }

    pub fn from_moments(mean: DVector<f64>, std: DVector<f64>) -> Result<Self> {
        Error::check_dim(mean.len(), std.len())?;
        let mut floored = Vec::new();
        let std = DVector::from_iterator(
            std.len(),
            std.iter().enumerate().map(|(i, &s)| {
                if s < STD_FLOOR {
                    floored.push(i);
                    STD_FLOOR
                } else {
                    s
                }
            }),
        );
        Ok(Self {
            mean,
            std,
            per_phase_mean: None,
            sample_count: 0,
            floored,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cycle_len(&self) -> Option<usize> {
        self.per_phase_mean.as_ref().map(Vec::len)
    }

    pub fn phase_mean(&self, phase: usize) -> Result<&DVector<f64>> {
        let table = self.per_phase_mean.as_ref().ok_or(Error::MissingPhaseTable)?;
        Ok(&table[phase % table.len()])
    }

    pub fn normalize_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.mean).component_div(&self.std)
    }

    pub fn denormalize_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        z.component_mul(&self.std) + &self.mean
    }
}

/// Fits per-coordinate climatological statistics (population convention).
///
/// With `cycle_len`, snapshot `k` belongs to phase `k mod cycle_len`; only the
/// largest whole number of cycles enters the per-phase table.
pub fn fit_climatology(data: &Trajectory, cycle_len: Option<usize>) -> Result<Climatology> {
    let n = data.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    let d = data.dim();
    let mut mean = DVector::zeros(d);
    for s in data.states() {
        mean += s.values();
    }
    mean /= n as f64;
    let mut var = DVector::zeros(d);
    for s in data.states() {
        let c = s.values() - &mean;
        var += c.component_mul(&c);
    }
    var /= n as f64;

    let per_phase_mean = match cycle_len {
        None => None,
        Some(0) => return Err(Error::InvalidParameter("cycle_len must be positive".into())),
        Some(p) => {
            let cycles = n / p;
            if cycles == 0 {
                return Err(Error::TooFewSamples { needed: p, found: n });
            }
            let mut table = vec![DVector::zeros(d); p];
            for (k, s) in data.states().iter().take(cycles * p).enumerate() {
                table[k % p] += s.values();
            }
            for m in &mut table {
                *m /= cycles as f64;
            }
            Some(table)
        }
    };

    let mut clim = Climatology::from_moments(mean, var.map(f64::sqrt))?;
    clim.per_phase_mean = per_phase_mean;
    clim.sample_count = n;
    Ok(clim)
}

pub fn normalize(x: &StateVector, c: &Climatology) -> Result<StateVector> {
    Error::check_dim(c.dim(), x.dim())?;
    Ok(StateVector {
        values: c.normalize_vec(x.values()),
    })
}

pub fn denormalize(z: &StateVector, c: &Climatology) -> Result<StateVector> {
    Error::check_dim(c.dim(), z.dim())?;
    Ok(StateVector {
        values: c.denormalize_vec(z.values()),
    })
}

/// Departure from the phase mean (when `phase` is given) or the global mean.
pub fn anomaly(x: &StateVector, c: &Climatology, phase: Option<usize>) -> Result<StateVector> {
    Error::check_dim(c.dim(), x.dim())?;
    let reference = match phase {
        Some(p) => c.phase_mean(p)?,
        None => &c.mean,
    };
    Ok(StateVector {
        values: x.values() - reference,
    })
}
