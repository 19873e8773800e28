//! Artifact I/O for one command invocation: atomic writes, content digests,
//! upstream verification and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::tensor::{Tensor, TensorMeta};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    /// Path as given for inputs; file name inside the output directory for outputs.
    pub file: String,
    pub role: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_clock_seconds: f64,
    pub steps: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}{MANIFEST_SUFFIX}"))
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

/// Looks up `path` in the manifests stored next to it and checks its digest.
pub fn verify_against_manifests(path: &Path, digest: &str) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::io(path, "not a file path"))?;
    let mut recorded = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_manifest = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(MANIFEST_SUFFIX));
        if !is_manifest {
            continue;
        }
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| CliError::io(&p, format!("unreadable manifest: {e}")))?;
        recorded.extend(m.outputs.into_iter().filter(|o| o.file == name).map(|o| (m.command.clone(), o.sha256)));
    }
    if recorded.is_empty() {
        return Err(CliError::io(path, "no manifest in its directory records this file"));
    }
    if recorded.iter().any(|(_, d)| d == digest) {
        return Ok(());
    }
    let (cmd, want) = &recorded[0];
    Err(CliError::io(
        path,
        format!("digest mismatch: {cmd} recorded {want}, file has {digest}"),
    ))
}

/// State of one command invocation.
pub struct Run {
    pub command: String,
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub quiet: bool,
    started: Instant,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    pub steps: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl Run {
    pub fn new(command: &str, cfg: ExperimentConfig, quiet: bool) -> CliResult<Self> {
        let out_dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
        Ok(Self {
            command: command.to_string(),
            cfg,
            out_dir,
            quiet,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            steps: 0,
            metrics: BTreeMap::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.command, msg.as_ref());
        }
    }

    /// Records a summary value; non-finite values are left out of the manifest.
    pub fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_string(), value);
        }
    }

    pub fn read_input(&mut self, path: &Path, role: &str) -> CliResult<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let digest = sha256_hex(&bytes);
        if self.cfg.inputs.verify {
            verify_against_manifests(path, &digest)?;
        }
        self.inputs.push(FileRecord {
            file: path.display().to_string(),
            role: role.to_string(),
            sha256: digest,
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path, role: &str) -> CliResult<T> {
        let bytes = self.read_input(path, role)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::io(path, format!("malformed {role}: {e}")))
    }

    /// Reads a tensor and its sidecar; the sidecar digest must match the payload.
    pub fn read_tensor(&mut self, path: &Path, role: &str) -> CliResult<(Tensor, TensorMeta)> {
        let bytes = self.read_input(path, role)?;
        let meta: TensorMeta = self.read_json(&sidecar_path(path), &format!("{role} sidecar"))?;
        let digest = sha256_hex(&bytes);
        if meta.digest != digest {
            return Err(CliError::io(path, format!("sidecar digest {} differs from payload {digest}", meta.digest)));
        }
        let t = Tensor::from_bytes(&bytes).map_err(|e| CliError::io(path, e))?;
        if t.shape != meta.shape {
            return Err(CliError::io(path, format!("sidecar shape {:?} differs from {:?}", meta.shape, t.shape)));
        }
        Ok((t, meta))
    }

    pub fn write_bytes(&mut self, name: &str, role: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes)?;
        self.outputs.push(FileRecord {
            file: name.to_string(),
            role: role.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, role: &str, value: &T) -> CliResult<PathBuf> {
        self.write_bytes(name, role, &to_json(value))
    }

    pub fn write_tensor(
        &mut self,
        name: &str,
        role: &str,
        t: &Tensor,
        attrs: BTreeMap<String, serde_json::Value>,
    ) -> CliResult<PathBuf> {
        let bytes = t.to_bytes();
        let meta = TensorMeta {
            name: name.to_string(),
            shape: t.shape.clone(),
            role: role.to_string(),
            digest: sha256_hex(&bytes),
            attrs,
        };
        let path = self.write_bytes(name, role, &bytes)?;
        self.write_json(&format!("{name}.json"), &format!("{role} sidecar"), &meta)?;
        Ok(path)
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.clone(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            steps: self.steps,
            metrics: self.metrics.clone(),
        }
    }

    /// Writes the manifest; called once all outputs exist.
    pub fn finish(self) -> CliResult<RunManifest> {
        let m = self.manifest();
        write_atomic(&manifest_path(&self.out_dir, &self.command), &to_json(&m))?;
        self.log(format!("done in {:.2} s", m.wall_clock_seconds));
        Ok(m)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn attrs<const N: usize>(pairs: [(&str, serde_json::Value); N]) -> BTreeMap<String, serde_json::Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path) -> Run {
        let cfg = ExperimentConfig {
            output_dir: dir.to_path_buf(),
            ..Default::default()
        };
        Run::new("unit", cfg, true).unwrap()
    }

    #[test]
    fn outputs_round_trip_through_manifest_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = run_in(dir.path());
        let t = Tensor::vector(&[1.0, 2.0]);
        let path = run.write_tensor("x.gapt", "test", &t, BTreeMap::new()).unwrap();
        run.finish().unwrap();

        let mut reader = run_in(dir.path());
        let (back, meta) = reader.read_tensor(&path, "test").unwrap();
        assert_eq!(back, t);
        assert_eq!(meta.shape, vec![2]);
        assert_eq!(reader.manifest().inputs.len(), 2);
    }

    #[test]
    fn tampered_file_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = run_in(dir.path());
        let path = run.write_json("a.json", "test", &vec![1, 2]).unwrap();
        run.finish().unwrap();
        std::fs::write(&path, b"[1,3]").unwrap();
        let err = run_in(dir.path()).read_input(&path, "test").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn unrecorded_file_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loose.json");
        std::fs::write(&path, b"{}").unwrap();
        assert!(run_in(dir.path()).read_input(&path, "test").is_err());
    }
}
