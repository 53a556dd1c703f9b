use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualpath::Error;

mod analyze;
mod run;
mod solve;

#[derive(Parser)]
#[command(name = "dualpath", version, about = "Dual-path transformer blocks: width solving, training, routing traces and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve FFN widths for a per-layer FLOP budget.
    Solve(solve::SolveArgs),
    /// Parameter count of the reference backbone at solved widths.
    Params(solve::ParamsArgs),
    /// Train a model on a byte corpus.
    Train(run::TrainArgs),
    /// Bits-per-byte of a checkpoint on a byte corpus.
    Eval(run::EvalArgs),
    /// Inference-time ablations of a checkpoint.
    Ablate(run::AblateArgs),
    /// Write a deterministic synthetic byte corpus.
    GenCorpus(run::GenCorpusArgs),
    /// Record per-token routing of a checkpoint over a text.
    Trace(analyze::TraceArgs),
    /// Reports over routing traces.
    Analyze(analyze::AnalyzeArgs),
}

/// Writes `text` to `out`, or to stdout without one.
pub fn emit(out: Option<&Path>, text: &str) -> dualpath::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => solve::solve(&a),
        Command::Params(a) => solve::params(&a),
        Command::Train(a) => run::train(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Ablate(a) => run::ablate(&a),
        Command::GenCorpus(a) => run::gen_corpus(&a),
        Command::Trace(a) => analyze::trace(&a),
        Command::Analyze(a) => analyze::analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Training { .. } => 3,
                Error::Input(_) | Error::Config(_) | Error::Format(_) => 2,
                _ => 1,
            })
        }
    }
}
