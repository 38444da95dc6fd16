//! `fedfa`: run experiments, the oracle suites and partition reports.
//!
//! Exit status: 0 on success, 1 when a run or a verification suite fails,
//! 2 when the configuration cannot be loaded or is invalid.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedfa_core::data::partition_report;
use fedfa_core::server::{files, prepare, run_experiment_with};
use fedfa_core::{verify, Error, ExperimentConfig};
use log::{info, warn};

/// Environment variable holding the log filter (default `info`).
const LOG_ENV: &str = "FEDFA_LOG";

#[derive(Parser, Debug)]
#[command(name = "fedfa", version, about = "Federated learning with feature anchors")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training threads (overrides `workers`; 0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write metrics, anchors and a checkpoint.
    Run {
        /// TOML file, or `preset:<name>`.
        config: String,
    },
    /// Run every oracle suite and print a pass/fail table.
    Verify,
    /// Print per-client class counts as JSON without training.
    PartitionReport {
        /// TOML file, or `preset:<name>`.
        config: String,
    },
}

enum Failure {
    Config(Error),
    Run(Error),
    Verify,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) | Failure::Verify => 1,
        }
    }
}

fn load(cli: &Cli, source: &str) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::load(source).map_err(Failure::Config)?;
    if let Some(out) = &cli.out {
        config.out_dir.clone_from(out);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    config.validate().map_err(Failure::Config)?;
    Ok(config)
}

fn cmd_run(cli: &Cli, source: &str) -> Result<(), Failure> {
    let config = load(cli, source)?;
    info!(
        "{} on {} clients ({} per round), {} rounds, seed {}, {} workers",
        config.strategy.name(),
        config.clients,
        config.clients_per_round(),
        config.rounds,
        config.seed,
        config.worker_count()
    );
    let out = run_experiment_with(&config, |rec| match rec.accuracy {
        Some(acc) => info!("round {:>4}  acc {acc:.4}  loss {:.4}", rec.round, rec.train_loss),
        None => log::debug!("round {:>4}  loss {:.4}", rec.round, rec.train_loss),
    })
    .map_err(Failure::Run)?;
    let last = out.records.last().and_then(|r| r.accuracy);
    println!(
        "{} rounds done; final accuracy {}; outputs in {}",
        out.state.round,
        last.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        config.out_dir.display()
    );
    info!(
        "wrote {}, {}, {}, {}, {}",
        files::RESOLVED,
        files::METRICS_JSONL,
        files::METRICS_CSV,
        files::ANCHORS,
        files::CHECKPOINT
    );
    Ok(())
}

fn cmd_verify() -> Result<(), Failure> {
    let results = verify::run_all();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{:<width$}  {}  {:>6.2}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        warn!("{failed} of {} suites failed", results.len());
        Err(Failure::Verify)
    }
}

fn cmd_partition_report(cli: &Cli, source: &str) -> Result<(), Failure> {
    let config = load(cli, source)?;
    let prepared = prepare(&config).map_err(Failure::Config)?;
    let report = partition_report(&prepared.partitions);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(Error::Serde(e.to_string())))?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => cmd_run(&cli, config),
        Command::Verify => cmd_verify(),
        Command::PartitionReport { config } => cmd_partition_report(&cli, config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("error: {e}"),
                Failure::Run(e) => eprintln!("run failed: {e}"),
                Failure::Verify => {}
            }
            ExitCode::from(f.code())
        }
    }
}
