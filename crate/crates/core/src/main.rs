use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rfiqkd::experiments::{run, Scenario, ScenarioConfig};
use rfiqkd::link::Backend;
use rfiqkd::Error;

#[derive(Parser)]
#[command(name = "rfiqkd", version, about = "Handheld reference-frame-independent QKD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key rate against a sweep of static axial rotations.
    Fig4(Common),
    /// Time-resolved handheld run with beam steering.
    Fig5(Common),
    /// Repeated short blocks with finite-size statistics.
    FiniteKey(Common),
    /// Hand-motion statistics and tracking performance.
    Steering(Common),
    /// Analyse one block, simulated or read from a counts file.
    Custom {
        #[command(flatten)]
        common: Common,
        /// Count matrix CSV to analyse instead of simulating.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON scenario configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Photon simulation backend: per-pulse or aggregated.
    #[arg(long)]
    backend: Option<Backend>,
}

fn execute(common: Common, scenario: Scenario, counts: Option<PathBuf>) -> rfiqkd::Result<()> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.output_dir = common.out;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if let Some(b) = common.backend {
        cfg.backend = b;
    }
    let out = run(&cfg, scenario, counts.as_deref())?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    for file in &out.files {
        let path = file.write_to(&dir)?;
        println!("wrote {}", path.display());
    }
    for flag in &out.flags {
        println!("flag: {flag}");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Json(_) | Error::Io(_) => 2,
        Error::Infeasible { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, scenario, counts) = match cli.command {
        Command::Fig4(c) => (c, Scenario::Fig4, None),
        Command::Fig5(c) => (c, Scenario::Fig5, None),
        Command::FiniteKey(c) => (c, Scenario::FiniteKey, None),
        Command::Steering(c) => (c, Scenario::Steering, None),
        Command::Custom { common, counts } => (common, Scenario::Custom, counts),
    };
    match execute(common, scenario, counts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", scenario.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
