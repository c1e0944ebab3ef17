use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod benchmark;
mod common;
mod generate;
mod solve;
mod validate;

use common::Outcome;

/// Penalized Poisson NMF: generate datasets, solve, benchmark and self-check.
#[derive(Debug, Parser)]
#[command(name = "pnmf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (ground truth, clean and noisy data) plus a manifest.
    Generate(generate::GenerateArgs),
    /// Factorize a data matrix and write W, H, the trace and a summary.
    Solve(solve::SolveArgs),
    /// Time every algorithm over a grid of sizes.
    Benchmark(benchmark::BenchmarkArgs),
    /// Certify the majorizers on random instances and compare bound tightness.
    #[command(name = "validate-majorizers", alias = "validate")]
    Validate(validate::ValidateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => generate::run(&args),
        Command::Solve(args) => solve::run(&args),
        Command::Benchmark(args) => benchmark::run(&args),
        Command::Validate(args) => validate::run(&args),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("pnmf: {msg}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("pnmf: {err:#}");
            ExitCode::from(common::exit_code(&err))
        }
    }
}
