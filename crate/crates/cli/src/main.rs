use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastv_cli::bench::{cmd_bench, BenchArgs};
use fastv_cli::flops::{cmd_flops, FlopsArgs};
use fastv_cli::profile::{cmd_profile, ProfileArgs};
use fastv_cli::run::{cmd_run, RunArgs};
use fastv_cli::workload::{cmd_gen, GenArgs};

/// Visual-token pruning lab: generation, profiling, cost grids and latency benchmarks.
#[derive(Debug, Parser)]
#[command(name = "fastv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy generation with optional pruning or a streaming mask.
    Run(RunArgs),
    /// Attention allocation/efficiency statistics and attention maps.
    Profile(ProfileArgs),
    /// Analytic cost reduction grid as CSV.
    Flops(FlopsArgs),
    /// Median wall-clock comparison of variants.
    Bench(BenchArgs),
    /// Seeded synthetic sequence specs.
    Gen(GenArgs),
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(a) => {
            for p in cmd_run(&a)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Profile(a) => {
            cmd_profile(&a)?;
        }
        Command::Flops(a) => {
            cmd_flops(&a)?;
        }
        Command::Bench(a) => {
            cmd_bench(&a)?;
        }
        Command::Gen(a) => {
            let paths = cmd_gen(&a)?;
            log::info!("wrote {} sequence spec(s)", paths.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(fastv_cli::exit_code(&e) as u8)
        }
    }
}
