//! Command-line front end for the `snoc` experiment pipeline.
//!
//! Every subcommand resolves an [`ExperimentConfig`] (from `--config`,
//! or from the `--scenario`/`--profile` preset), applies the optional
//! `--seed` override, runs one library command into `--out`, and prints
//! a JSON summary to stdout. Failures print a machine-readable
//! `{"error": {"kind", "message"}}` object to stderr and exit non-zero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use snoc::experiment::{
    cmd_bound_study, cmd_certify, cmd_evaluate, cmd_gen_data, cmd_grid_posterior,
    cmd_train_benchmark, cmd_train_empirical, cmd_train_svgd, EvalSource, ExperimentConfig,
    Profile, Scenario, BENCHMARK_CONTROLLER_FILE, BOUND_STUDY_FILE, CERTIFICATE_FILE,
    EMPIRICAL_CONTROLLER_FILE, ENSEMBLE_FILE, GRID_FILE, SVGD_CONTROLLER_FILE,
};
use snoc::pacbayes::BoundMode;

#[derive(Parser)]
#[command(
    name = "snoc",
    version,
    about = "Certified stochastic nonlinear optimal control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file; omit to use the --scenario/--profile preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Scenario preset (ignored when --config is given).
    #[arg(long, global = true, value_enum, default_value_t = ScenarioArg::Lti)]
    scenario: ScenarioArg,

    /// Budget preset (ignored when --config is given).
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Paper)]
    profile: ProfileArg,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training disturbance dataset as CSV.
    GenData,
    /// Fit a controller by gradient descent on the raw empirical cost.
    TrainEmpirical,
    /// Fit the scalar-scenario reference controller (mean-compensating
    /// offset, gain fit on a large dataset).
    TrainBenchmark,
    /// Sample the Gibbs posterior with particle training.
    TrainSvgd,
    /// Compute a high-probability bound certificate.
    Certify {
        /// Certificate mode; defaults to the config's certification
        /// setting.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a saved controller, or the zero-input baseline, on the
    /// training data and a fresh test set.
    Evaluate {
        /// Controller file path, or "zero" for the zero-input baseline.
        #[arg(long, value_name = "PATH|zero")]
        controller: String,
    },
    /// Sweep certified bounds against sampled true costs over data
    /// sizes, confidence levels and priors.
    BoundStudy,
    /// Emit the exact grid posterior with its marginals.
    GridPosterior,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Lti,
    Robots,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Ci,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    QstarExact,
    QstarEmpirical,
}

impl From<ScenarioArg> for Scenario {
    fn from(value: ScenarioArg) -> Self {
        match value {
            ScenarioArg::Lti => Scenario::Lti,
            ScenarioArg::Robots => Scenario::Robots,
        }
    }
}

impl From<ProfileArg> for Profile {
    fn from(value: ProfileArg) -> Self {
        match value {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Ci => Profile::Ci,
        }
    }
}

impl From<ModeArg> for BoundMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::QstarExact => BoundMode::QstarExact,
            ModeArg::QstarEmpirical => BoundMode::QstarEmpirical,
        }
    }
}

fn resolve_config(cli: &Cli) -> snoc::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(cli.scenario.into(), cli.profile.into()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn artifact(out: &Path, name: &str) -> String {
    out.join(name).display().to_string()
}

fn run(cli: &Cli) -> snoc::Result<Value> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    Ok(match &cli.command {
        Command::GenData => {
            let path = cmd_gen_data(&cfg, out)?;
            json!({
                "dataset": path.display().to_string(),
                "sequences": cfg.train_sequences,
                "horizon": cfg.horizon,
            })
        }
        Command::TrainEmpirical => {
            let file = cmd_train_empirical(&cfg, out)?;
            json!({
                "controller": artifact(out, EMPIRICAL_CONTROLLER_FILE),
                "label": file.label,
                "parameters": file.theta.len(),
            })
        }
        Command::TrainBenchmark => {
            let file = cmd_train_benchmark(&cfg, out)?;
            json!({
                "controller": artifact(out, BENCHMARK_CONTROLLER_FILE),
                "gain": file.theta[0],
                "offset": file.theta[1],
            })
        }
        Command::TrainSvgd => {
            let ensemble = cmd_train_svgd(&cfg, out)?;
            json!({
                "ensemble": artifact(out, ENSEMBLE_FILE),
                "controller": artifact(out, SVGD_CONTROLLER_FILE),
                "particles": ensemble.particles.len(),
            })
        }
        Command::Certify { mode } => {
            let mode = mode.map(BoundMode::from).unwrap_or(cfg.certification);
            let cert = cmd_certify(&cfg, out, mode)?;
            let mut value = serde_json::to_value(&cert)?;
            value["certificate"] = Value::String(artifact(out, CERTIFICATE_FILE));
            value
        }
        Command::Evaluate { controller } => {
            let source = if controller == "zero" {
                EvalSource::ZeroBaseline
            } else {
                EvalSource::Controller(PathBuf::from(controller))
            };
            serde_json::to_value(cmd_evaluate(&cfg, out, &source)?)?
        }
        Command::BoundStudy => {
            let csv = cmd_bound_study(&cfg, out)?;
            json!({
                "csv": artifact(out, BOUND_STUDY_FILE),
                "cells": csv.lines().count().saturating_sub(1),
            })
        }
        Command::GridPosterior => {
            let grid = cmd_grid_posterior(&cfg, out)?;
            json!({
                "grid": artifact(out, GRID_FILE),
                "cells": grid.mass.len(),
                "lambda": grid.lambda,
            })
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable summary"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": err.kind(), "message": err.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
