//! `bundlelab`: simulate a hidden bundle, reconstruct it from energy
//! measurements, and judge the result.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bundlelab_core::scenario::ScenarioConfig;
use clap::{Args, Parser, Subcommand};

use commands::{Outcome, Stage};

#[derive(Parser)]
#[command(name = "bundlelab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the hidden model and write its spectrum and sample energies.
    Simulate(Common),
    /// Recover the bundle, metric and operator through the oracle.
    Reconstruct(Common),
    /// Compare the recovered model with the hidden one.
    Verify(Common),
    /// Write tables and a text summary from the verification.
    Report(Common),
    /// All four stages in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set bundle.nodes=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Rerun even when the inputs are unchanged.
    #[arg(long)]
    force: bool,
}

fn run(cli: Cli) -> Result<Outcome> {
    let (c, stages): (&Common, &[&str]) = match &cli.command {
        Command::Simulate(c) => (c, &["simulate"]),
        Command::Reconstruct(c) => (c, &["reconstruct"]),
        Command::Verify(c) => (c, &["verify"]),
        Command::Report(c) => (c, &["report"]),
        Command::Run(c) => (c, &["simulate", "reconstruct", "verify", "report"]),
    };
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = ScenarioConfig::load(&c.config, &overrides)?;
    let mut stage = Stage {
        config: &config,
        ws: artifacts::Workspace::open(&c.out)?,
        force: c.force,
    };
    let mut outcome = Outcome::UpToDate;
    for name in stages {
        let o = match *name {
            "simulate" => stage.simulate()?,
            "reconstruct" => stage.reconstruct()?,
            "verify" => stage.verify()?,
            _ => stage.report()?,
        };
        if o != Outcome::UpToDate {
            outcome = o;
        }
        if outcome == Outcome::Failed && *name == "verify" && stages.len() > 1 {
            // still write the tables, then report the failure
            stage.report()?;
            break;
        }
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Failed) => ExitCode::from(1),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
