//! Experiment runner: configuration, artifact persistence and one
//! subcommand per pipeline of `gap-core`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod tensor;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

pub use artifacts::{Run, RunManifest};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use tensor::{Tensor, TensorMeta};

#[derive(Debug, Parser)]
#[command(name = "gap", version, about = "Generative assimilation and prediction experiments")]
pub struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for ensemble parallelism.
    #[arg(long, global = true, env = "GAP_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate training data, a held-out truth run and the climatology.
    GenerateData,
    /// Fit or train the score model.
    TrainScore,
    /// Train or materialize the one-step forecaster.
    TrainForecaster,
    /// Run the sequential assimilation cycle on synthetic observations.
    Assimilate,
    /// Ensemble forecasts from perturbed held-out states.
    Forecast,
    /// Forecasts constrained by persisted forcing anomalies.
    Seasonal,
    /// Long free run with streaming statistics.
    ClimateRun,
    /// Select the SDEdit noise level on held-out data.
    CalibrateTau,
    /// Score a stored ensemble series against the held-out truth.
    Evaluate,
    /// Kalman, EnKF, persistence or climatology reference runs.
    Baseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::TrainScore => "train-score",
            Command::TrainForecaster => "train-forecaster",
            Command::Assimilate => "assimilate",
            Command::Forecast => "forecast",
            Command::Seasonal => "seasonal",
            Command::ClimateRun => "climate-run",
            Command::CalibrateTau => "calibrate-tau",
            Command::Evaluate => "evaluate",
            Command::Baseline => "baseline",
        }
    }
}

/// Reads the configuration, applies flag overrides and materializes defaults.
pub fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.resolve()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool can only be installed once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(cli)?;
    let mut run = Run::new(cli.command.name(), cfg, cli.quiet)?;
    let result = match cli.command {
        Command::GenerateData => commands::generate_data(&mut run),
        Command::TrainScore => commands::train_score(&mut run),
        Command::TrainForecaster => commands::train_forecaster(&mut run),
        Command::Assimilate => commands::assimilate(&mut run),
        Command::Forecast => commands::forecast(&mut run),
        Command::Seasonal => commands::seasonal(&mut run),
        Command::ClimateRun => commands::climate_run(&mut run),
        Command::CalibrateTau => commands::calibrate_tau(&mut run),
        Command::Evaluate => commands::evaluate(&mut run),
        Command::Baseline => commands::baseline(&mut run),
    };
    if let Err(CliError::Diverged { step, state }) = &result {
        let report = json!({ "command": run.command, "step": step, "state": state });
        let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        artifacts::write_atomic(&run.out_dir.join("divergence.json"), &bytes)?;
    }
    result?;
    run.finish()
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
