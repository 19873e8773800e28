//! Binary tensor format: magic `GAPT`, format version (u16), rank (u16),
//! dims (u64 each), then the f64 payload in row-major order. All integers and
//! floats are little-endian.

use std::collections::BTreeMap;

use gap_core::{Ensemble, StateVector, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"GAPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Sidecar description written next to every tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: String,
    pub digest: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> CliResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CliError::Config(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            shape: vec![t.len(), t.dim()],
            data: t.to_row_major(),
        }
    }

    pub fn from_states(states: &[StateVector], dim: usize) -> Self {
        Self {
            shape: vec![states.len(), dim],
            data: states.iter().flat_map(|s| s.as_slice().iter().copied()).collect(),
        }
    }

    pub fn from_ensemble(e: &Ensemble) -> Self {
        Self::from_states(e.members(), e.dim())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> CliResult<Self> {
        let inner = parts.first().map(|p| p.shape.clone()).unwrap_or_default();
        let mut data = Vec::with_capacity(parts.len() * inner.iter().product::<usize>());
        for p in parts {
            if p.shape != inner {
                return Err(CliError::Config(format!("cannot stack shapes {inner:?} and {:?}", p.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(Self { shape, data })
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    pub fn to_trajectory(&self, dt: f64, t0: f64) -> CliResult<Trajectory> {
        if self.rank() != 2 {
            return Err(CliError::Config(format!("expected a rank-2 tensor, got shape {:?}", self.shape)));
        }
        Ok(Trajectory::from_row_major(&self.data, self.shape[1], dt, t0)?)
    }

    pub fn to_ensemble(&self) -> CliResult<Ensemble> {
        if self.rank() != 2 {
            return Err(CliError::Config(format!("expected a rank-2 tensor, got shape {:?}", self.shape)));
        }
        let d = self.shape[1];
        let members = self
            .data
            .chunks(d)
            .map(|c| StateVector::new(c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ensemble::from_members(members)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u16).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let bad = |msg: &str| CliError::Io(format!("malformed tensor: {msg}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing GAPT header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated shape"));
        }
        let shape: Vec<usize> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("shape overflows"))?;
        if bytes.len() != header + 8 * n {
            return Err(bad(&format!("payload has {} bytes, shape {shape:?} needs {}", bytes.len() - header, 8 * n)));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }
}
