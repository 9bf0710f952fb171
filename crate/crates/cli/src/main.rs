//! Experiment driver for the auction-policy laboratory: each subcommand
//! runs one pipeline stage against a shared TOML config and a shared
//! output directory.

mod config;
mod stages;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use stages::CliError;

#[derive(Parser)]
#[command(
    name = "adlab",
    version,
    about = "Synthetic ad-auction laboratory: simulate, train, compare"
)]
struct Cli {
    /// Experiment config (TOML). Every field has a default, so the flag
    /// can be omitted entirely.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed override; all per-stage seeds derive from it.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Force single-threaded, bit-reproducible execution everywhere.
    #[arg(long, global = true)]
    single_thread: bool,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Draw the synthetic marketplace and write market.json.
    GenMarket,
    /// Roll out the exploration policy and write transitions.csv.
    Simulate,
    /// Fit monotone prediction maps; write market_calibrated.json.
    Calibrate,
    /// Sweep the ranking-parameter lattice; write the reward surface.
    GridSearch,
    /// Train dueling and plain critics; write convergence logs and the
    /// trained actor.
    TrainDdpg,
    /// Refine the trained actor with the evolution strategy.
    RunEs,
    /// Join stage outputs into comparison CSVs.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text).map_err(|e| {
                CliError::Config(format!("bad config {}: {e}", path.display()))
            })?
        }
        None => ExperimentConfig::default(),
    };
    Ok(base.finalize(cli.seed, cli.out.clone(), cli.single_thread))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        CliError::Other(format!("cannot create {}: {e}", cfg.output_dir.display()))
    })?;
    match cli.cmd {
        Cmd::GenMarket => stages::gen_market(&cfg),
        Cmd::Simulate => stages::simulate(&cfg),
        Cmd::Calibrate => stages::calibrate(&cfg),
        Cmd::GridSearch => stages::grid_search_stage(&cfg),
        Cmd::TrainDdpg => stages::train_ddpg(&cfg),
        Cmd::RunEs => stages::run_es(&cfg),
        Cmd::Report => stages::report(&cfg),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
