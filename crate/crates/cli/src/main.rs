//! `eos-lab`: runs optimizer traces, limiting flows and quadratic checks from a
//! TOML config, writing CSV files, a JSON summary and SVG plots.

mod commands;
mod config;
mod error;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "eos-lab", version, about = "Edge-of-stability experiments for normalized GD and GD on sqrt(L)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override optimizer.eta.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Override optimizer.steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Exit with status 1 when any property check fails.
    #[arg(long, global = true)]
    check: bool,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Invariant-set, alignment and limit-cycle checks on random quadratics.
    Quadratic {
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Optimizer trace with diagnostics.
    Run,
    /// Limiting-flow trajectory on the manifold of minimizers.
    Flow,
    /// Projected optimizer trajectory against the limiting flow.
    Compare,
    /// Stableness and two-step identities at every step.
    StablenessScan,
    /// Line plots of CSV columns.
    Plot {
        input: PathBuf,
        /// Column used for the horizontal axis.
        #[arg(long, default_value = "step")]
        x: String,
        /// Comma-separated columns, one panel each.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let ov = Overrides { seed: cli.seed, eta: cli.eta, steps: cli.steps, out_dir: cli.out_dir.clone() };
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::parse(&text, &path.display().to_string(), &ov)
        }
        None => ExperimentConfig::defaults(&ov),
    }
}

fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    if let Command::Plot { input, x, columns } = &cli.command {
        let dir = cli.out_dir.clone().or_else(|| input.parent().map(PathBuf::from)).unwrap_or_default();
        return commands::plot(input, x, columns, &dir);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Quadratic { seeds } => commands::quadratic(&cfg, *seeds),
        Command::Run => commands::run_trace(&cfg),
        Command::Flow => commands::flow(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::StablenessScan => commands::stableness_scan(&cfg),
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match dispatch(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("eos-lab: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let s = &outcome.summary;
    if !cli.quiet {
        for f in &s.files {
            println!("wrote {}", f.display());
        }
        for (name, verdict) in &s.checks {
            println!("{name}: {verdict}");
        }
    }
    if let Some(msg) = &outcome.numerical_failure {
        eprintln!("eos-lab: numerical failure: {msg}");
        return ExitCode::from(3);
    }
    if cli.check && !s.all_passed() {
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
