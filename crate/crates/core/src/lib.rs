//! Generative assimilation and prediction with conditional score-based diffusion.
//!
//! A diffusion model learns the climatological distribution of a dynamical
//! system's state. Observations, forecasts and external forcing are imposed
//! at sampling time to perform data assimilation, ensemble forecasting,
//! forcing-constrained seasonal prediction and long free-running simulations.

pub mod assimilation;
pub mod baselines;
pub mod conditioning;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod prediction;
pub mod rng;
pub mod state;
pub mod verification;

pub use assimilation::{assimilation_cycle, cold_start, gap_step, AssimilationConfig, CycleRecord, GapContext, ObsLayout};
pub use conditioning::{
    likelihood_gradient, sample_conditioned, sdedit, GuidanceConfig, GuidanceMode, JacobianMode, ObservationSet,
    SDEditConfig, SigmaTauMode,
};
pub use diffusion::{build_schedule, sample, NoiseSchedule, SamplerConfig, SamplerMethod, ScoreKind, ScoreModel};
pub use dynamics::{forecast, generate_dataset, step_truth, ForecastKind, ForecastModel, SystemKind, SystemSpec};
pub use error::{Error, Result};
pub use prediction::{climate_run, ensemble_forecast, seasonal_run, ClimateRunStats, ForecastRun, Forcing};
pub use state::{fit_climatology, Climatology, Ensemble, StateVector, Trajectory};
