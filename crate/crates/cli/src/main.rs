use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod dataset;

use commands::{EvalArgs, ExpandArgs, GenSynthArgs, ProbeArgs, TrainArgs};

/// Residual tensor train experiments.
///
/// Every option may also come from a `key=value` file given with
/// `--config`; options on the command line win. Each command writes a
/// `manifest.txt` into its output directory that can be passed back as
/// `--config` to repeat the run.
#[derive(Debug, Parser)]
#[command(name = "restt", version, args_override_self = true)]
pub struct Cli {
    /// key=value file with default option values (`#` starts a comment)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic third-order regression data set
    GenSynth(GenSynthArgs),
    /// Train a model and write the run log, checkpoint and manifest
    Train(TrainArgs),
    /// Compare predicted and measured signal propagation at initialization
    ProbeMeanfield(ProbeArgs),
    /// Dump the monomial expansion of a small checkpoint
    Expand(ExpandArgs),
    /// Evaluate a checkpoint on a data set
    Eval(EvalArgs),
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match config::parse_with_config(&argv) {
        Ok(cli) => cli,
        Err(config::ParseFailure::Clap(e)) => e.exit(),
        Err(config::ParseFailure::File(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match &cli.command {
        Command::GenSynth(a) => commands::gen_synth(a, &cli),
        Command::Train(a) => commands::train(a, &cli),
        Command::ProbeMeanfield(a) => commands::probe_meanfield(a, &cli),
        Command::Expand(a) => commands::expand(a, &cli),
        Command::Eval(a) => commands::eval(a, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Config problems exit with 2, data problems with 3, divergence with 4.
fn exit_code(err: &anyhow::Error) -> u8 {
    use restt::Error as E;
    if err.downcast_ref::<commands::ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<E>() {
        Some(E::Diverged { .. }) => EXIT_DIVERGED,
        Some(
            E::Topology(_)
            | E::NonPositiveVariance(_)
            | E::SizeGuard(_)
            | E::WrongPreset(_)
            | E::Hyperparameter(_)
            | E::Parse(_)
            | E::InvalidFraction(_)
            | E::ZeroInputStats,
        ) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}
