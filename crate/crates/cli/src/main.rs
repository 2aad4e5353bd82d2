//! `fwlab`: config-driven runs of the simulation, quasi-potential, W-graph
//! and invariant-measure stages, plus desk-scale reproductions of the
//! built-in examples.

mod config;
mod reproduce;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::config::{ExperimentConfig, Plan, Stage};
use crate::reproduce::Example;
use crate::run::{write_manifest, Failure, Outputs, RunContext, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "fwlab", version, about = "Small-noise SDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Validate the configuration and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Args)]
struct StageArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate trajectories with the tamed Euler scheme.
    Simulate(StageArgs),
    /// Minimum-action quasi-potential between points or sets.
    Quasipotential(StageArgs),
    /// W-graph costs, hierarchy and rate function from a cost matrix.
    Wgraph(StageArgs),
    /// Empirical invariant measures, concentration and exponent fits.
    Measure(StageArgs),
    /// Reproduce a built-in example and check it against its thresholds.
    Reproduce {
        example: Option<Example>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn validation(msg: String) -> ExitCode {
    eprintln!("validation error: {msg}");
    ExitCode::from(EXIT_VALIDATION as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            return validation("--threads must be >= 1".into());
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return validation(format!("cannot configure {n} threads: {e}"));
        }
    }

    let (stage, config_path, example) = match &cli.command {
        Command::Simulate(a) => (Stage::Simulate, Some(a.config.clone()), None),
        Command::Quasipotential(a) => (Stage::Quasipotential, Some(a.config.clone()), None),
        Command::Wgraph(a) => (Stage::Wgraph, Some(a.config.clone()), None),
        Command::Measure(a) => (Stage::Measure, Some(a.config.clone()), None),
        Command::Reproduce { example, config } => (Stage::Reproduce, config.clone(), *example),
    };
    let mut cfg = match &config_path {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => return validation(e),
        },
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    let base = config_path.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
    let plan = match cfg.plan(stage, base, example) {
        Ok(p) => p,
        Err(e) => return validation(e),
    };
    if cli.dry_run {
        println!("{} config is valid", stage.name());
        return ExitCode::SUCCESS;
    }

    let started = Instant::now();
    let ctx = RunContext {
        command: stage.name(),
        seed: cfg.effective_seed(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        started,
    };
    let mut out = match Outputs::create(&cfg.out_dir()) {
        Ok(o) => o,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match &plan {
        Plan::Simulate(p) => run::run_simulate(p, &mut out),
        Plan::QuasiPotential(p) => run::run_quasipotential(p, &mut out),
        Plan::WGraph(p) => run::run_wgraph(p, &mut out),
        Plan::Measure(p) => run::run_measure(p, &mut out),
        Plan::Reproduce(e) => reproduce::run_reproduce(*e, ctx.seed, &mut out),
    };
    if let Err(e) = write_manifest(&mut out, &ctx, &outcome) {
        error!("cannot write manifest: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if let Failure::Acceptance(names) = &e {
                eprintln!("failing checks: {}", names.join(", "));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
