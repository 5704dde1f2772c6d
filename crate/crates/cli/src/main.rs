//! `uldp`: assumption audits, simulation, minimum action and large deviation
//! studies driven by a JSON config.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "uldp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Top-level seed, overriding `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Changes speed only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run every assumption audit; exit 0 iff all pass.
    Check,
    /// Minimum action to a target endpoint, with a gradient check.
    Minact,
    /// LDP comparison and condition (i)/(ii) studies.
    Study,
    /// Simulate trajectories of the SDE or the controlled SDE.
    Simulate,
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::usage("--config is required"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot configure thread pool: {e}")))?;
    }
    let out = cli.output.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = match cli.command {
        Command::Check => commands::cmd_check(&cfg, &out)?,
        Command::Minact => commands::cmd_minact(&cfg, &out)?,
        Command::Study => commands::cmd_study(&cfg, &out)?,
        Command::Simulate => commands::cmd_simulate(&cfg, &out)?,
    };
    for p in &outcome.written {
        println!("{}", p.display());
    }
    Ok(outcome.success)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
