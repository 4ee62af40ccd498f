//! `dle`: distinct leaf enumeration experiments from the command line.

mod curve;
mod error;
mod report;
mod run;
mod setup;
mod tools;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dle", version, about = "Enumerate distinct leaves of truncated decoding trees")]
struct Cli {
    /// Worker threads for per-prompt work. 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enumerate distinct leaves with a branch policy and budget.
    Enumerate(run::EnumerateArgs),
    /// Draw independent samples from the truncated distribution.
    Sample(run::SampleArgs),
    /// Coverage curve with token accounting for DLE and sampling.
    Compare(curve::CurveArgs),
    /// Coverage curve for DLE, sampling and the closed form.
    CoverageCurve(curve::CurveArgs),
    /// Replay leaves through a prefix cache.
    CacheSim(tools::CacheSimArgs),
    /// Majority vote over extracted answers.
    Vote(tools::VoteArgs),
    /// Train an add-alpha n-gram model.
    NgramTrain(tools::NgramTrainArgs),
    /// Brute-force leaf enumeration and closed forms.
    Oracle(tools::OracleArgs),
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Enumerate(a) => run::enumerate_command(a),
        Command::Sample(a) => run::sample_command(a),
        Command::Compare(a) => curve::curve_command(a, true),
        Command::CoverageCurve(a) => curve::curve_command(a, false),
        Command::CacheSim(a) => tools::cache_sim_command(a),
        Command::Vote(a) => tools::vote_command(a),
        Command::NgramTrain(a) => tools::ngram_train_command(a),
        Command::Oracle(a) => tools::oracle_command(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
