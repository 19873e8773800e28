//! Experiment configuration. Every section is optional in the TOML file;
//! unknown keys are rejected and all defaults are resolved before a run so
//! the manifest records the complete configuration.

use std::path::{Path, PathBuf};

use gap_core::assimilation::ObsLayout;
use gap_core::baselines::ClimatologyMode;
use gap_core::diffusion::LossWeighting;
use gap_core::dynamics::{SystemKind, SystemSpec};
use gap_core::{ForecastKind, GuidanceConfig, SamplerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub forecaster: ForecasterConfig,
    pub conditioning: ConditioningConfig,
    pub assimilation: AssimilationSection,
    pub forecast: ForecastSection,
    pub seasonal: SeasonalSection,
    pub climate: ClimateSection,
    pub calibration: CalibrationSection,
    pub baseline: BaselineSection,
    pub inputs: InputsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            system: SystemConfig::default(),
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            forecaster: ForecasterConfig::default(),
            conditioning: ConditioningConfig::default(),
            assimilation: AssimilationSection::default(),
            forecast: ForecastSection::default(),
            seasonal: SeasonalSection::default(),
            climate: ClimateSection::default(),
            calibration: CalibrationSection::default(),
            baseline: BaselineSection::default(),
            inputs: InputsConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemChoice {
    Lorenz63,
    Lorenz96,
    Lorenz96Forced,
    /// Seeded stable Ornstein-Uhlenbeck process (linear-Gaussian).
    RandomOu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub kind: SystemChoice,
    /// Total state dimension (forcing coordinates included).
    pub dim: usize,
    pub forcing: f64,
    pub n_forcing: usize,
    pub coupling: f64,
    pub relax_time: f64,
    pub season_amplitude: f64,
    pub season_period_steps: usize,
    pub anomaly_std: f64,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub ou_seed: u64,
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            kind: SystemChoice::Lorenz96,
            dim: 40,
            forcing: 8.0,
            n_forcing: 4,
            coupling: 3.0,
            relax_time: 10.0,
            season_amplitude: 1.0,
            season_period_steps: 400,
            anomaly_std: 1.0,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            ou_seed: 4,
            dt: None,
            substeps: None,
        }
    }
}

impl SystemConfig {
    pub fn to_spec(&self) -> CliResult<SystemSpec> {
        let mut spec = match self.kind {
            SystemChoice::Lorenz63 => {
                let mut s = SystemSpec::lorenz63();
                s.kind = SystemKind::Lorenz63 {
                    sigma: self.sigma,
                    rho: self.rho,
                    beta: self.beta,
                };
                s
            }
            SystemChoice::Lorenz96 => SystemSpec::lorenz96(self.dim, self.forcing),
            SystemChoice::Lorenz96Forced => {
                let mut s = SystemSpec::lorenz96_forced(self.dim, self.n_forcing);
                s.kind = SystemKind::Lorenz96Forced {
                    forcing: self.forcing,
                    n_forcing: self.n_forcing,
                    coupling: self.coupling,
                    relax_time: self.relax_time,
                    season_amplitude: self.season_amplitude,
                    season_period_steps: self.season_period_steps,
                    anomaly_std: self.anomaly_std,
                };
                s
            }
            SystemChoice::RandomOu => SystemSpec::random_stable_ou(self.dim, self.dt.unwrap_or(0.3), self.ou_seed)?,
        };
        if self.kind != SystemChoice::RandomOu {
            if let Some(dt) = self.dt {
                spec.dt = dt;
            }
            if let Some(n) = self.substeps {
                spec.substeps = n;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_spinup: usize,
    pub n_samples: usize,
    pub thin: usize,
    /// Steps skipped between the training set and the held-out truth run.
    pub holdout_gap: usize,
    /// Length of the held-out truth run in model steps.
    pub holdout_steps: usize,
    /// Seasonal phase count of the climatology (defaults to the system's period).
    pub cycle_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_spinup: 2000,
            n_samples: 20_000,
            thin: 5,
            holdout_gap: 1000,
            holdout_steps: 2000,
            cycle_len: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreChoice {
    /// Gaussian fitted to the normalized training data.
    GaussianFit,
    /// Exact stationary law of a linear-Gaussian system.
    Analytic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_steps: usize,
    pub model: ScoreChoice,
    /// Gaussian fits use every `fit_thin`-th training state.
    pub fit_thin: usize,
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weighting: LossWeighting,
    pub tau_min: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let t = gap_core::diffusion::ScoreTraining::default();
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            n_steps: 100,
            model: ScoreChoice::GaussianFit,
            fit_thin: 1,
            hidden_sizes: t.hidden_sizes,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            weighting: t.weighting,
            tau_min: t.tau_min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    pub kind: ForecastKind,
    pub forcing_delta: f64,
    pub substep_divisor: usize,
    pub relax_time: Option<f64>,
    /// Injected bias per step in units of the climatological std (0 disables).
    pub bias_std: f64,
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        let t = gap_core::dynamics::ForecasterTraining::default();
        Self {
            kind: ForecastKind::Perfect,
            forcing_delta: 1.0,
            substep_divisor: 1,
            relax_time: None,
            bias_std: 0.0,
            hidden_sizes: t.hidden_sizes,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssimilationSection {
    pub window_steps: usize,
    pub obs_every: usize,
    pub ensemble_size: usize,
    pub tau_star_idx: usize,
    pub n_obs: usize,
    pub sigma_o: f64,
    pub layout: ObsLayout,
    /// Index into the held-out truth run of the first analysis time.
    pub start_index: usize,
}

impl Default for AssimilationSection {
    fn default() -> Self {
        Self {
            window_steps: 50,
            obs_every: 1,
            ensemble_size: 32,
            tau_star_idx: 5,
            n_obs: 8,
            sigma_o: 1.0,
            layout: ObsLayout::RandomPerStep,
            start_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub n_cases: usize,
    pub case_spacing: usize,
    pub lead_steps: usize,
    pub ensemble_size: usize,
    pub tau_star_idx: usize,
    /// Std of the Gaussian perturbation added to the true initial state.
    pub init_std: f64,
    pub start_index: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            n_cases: 1,
            case_spacing: 100,
            lead_steps: 100,
            ensemble_size: 32,
            tau_star_idx: 5,
            init_std: 0.2,
            start_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeasonalSection {
    pub n_cases: usize,
    pub case_spacing: usize,
    pub lead_steps: usize,
    pub ensemble_size: usize,
    pub tau_star_idx: usize,
    pub init_std: f64,
    pub start_index: usize,
    /// Also run the unforced forecast from the same initial ensembles.
    pub include_free_run: bool,
}

impl Default for SeasonalSection {
    fn default() -> Self {
        Self {
            n_cases: 1,
            case_spacing: 137,
            lead_steps: 240,
            ensemble_size: 32,
            tau_star_idx: 10,
            init_std: 0.2,
            start_index: 0,
            include_free_run: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClimateSection {
    pub n_steps: u64,
    pub tau_star_idx: usize,
    pub cadence: u64,
    pub thin: u64,
    pub burn_in: u64,
    pub trace_every: u64,
    /// Prescribe the seasonal forcing shifted by this amount (forced systems).
    pub forcing_shift: Option<f64>,
}

impl Default for ClimateSection {
    fn default() -> Self {
        let c = gap_core::prediction::ClimateRunConfig::default();
        Self {
            n_steps: 100_000,
            tau_star_idx: c.tau_star_idx,
            cadence: c.cadence,
            thin: c.thin,
            burn_in: c.burn_in,
            trace_every: c.trace_every,
            forcing_shift: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub candidates: Vec<usize>,
    pub n_ens: usize,
    pub n_cases: usize,
    pub lead_steps: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            candidates: vec![0, 5, 10, 20, 50],
            n_ens: 8,
            n_cases: 50,
            lead_steps: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Kalman,
    Enkf,
    Persistence,
    Climatology,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub method: BaselineMethod,
    pub inflation: f64,
    pub ensemble_size: usize,
    pub climatology_mode: ClimatologyMode,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Kalman,
            inflation: 1.0,
            ensemble_size: 32,
            climatology_mode: ClimatologyMode::Resample,
        }
    }
}

/// Upstream artifacts. Unset paths default to the canonical file name in
/// `output_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsConfig {
    pub data: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub climatology: Option<PathBuf>,
    pub score: Option<PathBuf>,
    pub forecaster: Option<PathBuf>,
    pub forecast: Option<PathBuf>,
    /// Check every input against the digest recorded by the run that wrote it.
    pub verify: bool,
}

impl Default for InputsConfig {
    fn default() -> Self {
        Self {
            data: None,
            holdout: None,
            climatology: None,
            score: None,
            forecaster: None,
            forecast: None,
            verify: true,
        }
    }
}

pub const DATA_FILE: &str = "data.gapt";
pub const HOLDOUT_FILE: &str = "holdout.gapt";
pub const CLIMATOLOGY_FILE: &str = "climatology.json";
pub const SCORE_FILE: &str = "score.json";
pub const FORECASTER_FILE: &str = "forecaster.json";
pub const FORECAST_FILE: &str = "forecast.gapt";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fills every optional setting with its effective value.
    pub fn resolve(&mut self) -> CliResult<()> {
        let spec = self.system.to_spec()?;
        self.system.dt = Some(spec.dt);
        self.system.substeps = Some(spec.substeps);
        if self.system.kind != SystemChoice::Lorenz96Forced {
            self.system.n_forcing = 0;
        }
        if let Some(p) = spec.season_period() {
            if self.data.thin != 1 || self.data.n_spinup % p != 0 {
                return Err(CliError::Config(format!(
                    "seasonal systems need data.thin = 1 and data.n_spinup a multiple of {p}"
                )));
            }
        }
        if self.data.thin == 0 {
            return Err(CliError::Config("data.thin must be at least 1".into()));
        }
        if self.data.cycle_len.is_none() {
            self.data.cycle_len = spec.season_period();
        }
        let dir = self.output_dir.clone();
        let fill = |p: &mut Option<PathBuf>, name: &str| {
            if p.is_none() {
                *p = Some(dir.join(name));
            }
        };
        fill(&mut self.inputs.data, DATA_FILE);
        fill(&mut self.inputs.holdout, HOLDOUT_FILE);
        fill(&mut self.inputs.climatology, CLIMATOLOGY_FILE);
        fill(&mut self.inputs.score, SCORE_FILE);
        fill(&mut self.inputs.forecaster, FORECASTER_FILE);
        fill(&mut self.inputs.forecast, FORECAST_FILE);
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[system]\ndimm = 3").is_err());
        assert!(ExperimentConfig::from_toml("[conditioning.guidance]\nlr = 3").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_toml("[conditioning.sampler]\nmethod = \"ddim\"\n[system]\ndim = 12").unwrap();
        assert_eq!(c.system.dim, 12);
        assert_eq!(c.system.forcing, 8.0);
        assert_eq!(c.conditioning.sampler.n_steps, 100);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::default();
        c.resolve().unwrap();
        assert_eq!(c.system.dt, Some(0.05));
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn seasonal_systems_need_unthinned_data() {
        let mut c = ExperimentConfig::default();
        c.system.kind = SystemChoice::Lorenz96Forced;
        c.system.dim = 44;
        assert!(c.resolve().is_err());
        c.data.thin = 1;
        c.data.n_spinup = 4000;
        c.resolve().unwrap();
        assert_eq!(c.data.cycle_len, Some(400));
    }
}
