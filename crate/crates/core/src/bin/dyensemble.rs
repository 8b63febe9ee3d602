use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dyensemble::scenario::{run_scenario, ExperimentConfig, Scenario};
use dyensemble::Error;

/// Dynamic-ensemble decoding experiments.
#[derive(Parser)]
#[command(name = "dyensemble", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Piecewise simulation with the three exact candidates.
    Simulate(RunArgs),
    /// Synthetic decoding report: Kalman vs ensemble variants, clean and noisy.
    Decode(RunArgs),
    /// Parameter sweeps over s, M, alpha, p.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> dyensemble::Result<()> {
    let (scenario, args) = match cli.command {
        Command::Simulate(a) => (Scenario::Simulation, a),
        Command::Decode(a) => (Scenario::SynthDecode, a),
        Command::Sweep(a) => (Scenario::Sweep, a),
    };
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::new(scenario),
    };
    if cfg.scenario != scenario {
        return Err(Error::Config(format!(
            "config is for scenario {}, not {}",
            cfg.scenario.name(),
            scenario.name()
        )));
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out".into()))?;
    run_scenario(&cfg, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
