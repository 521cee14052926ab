//! `nail` — build, query, train, and evaluate a sparse lexical retriever
//! from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
//! invariant violation.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use nail_core::Error;

use args::{load_defaults, pick, Cli, Command};

fn run(cli: Cli) -> nail_core::Result<()> {
    let file = load_defaults(cli.config.as_deref())?;
    let seed = pick(cli.seed, file.seed, 0);
    match cli.command {
        Command::BuildIndex(a) => commands::build_index(a, &file),
        Command::Retrieve(a) => commands::retrieve(a, &file),
        Command::Rerank(a) => commands::rerank_run(a, &file),
        Command::Train(a) => commands::train_model(a, &file, seed),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a, &file),
        Command::Flops(a) => commands::flops(a),
        Command::TopTerms(a) => commands::top_terms(a, &file),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Io { .. } | Error::Format { .. } | Error::Incompatible(_) => 2,
        Error::Invariant(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; anything else is usage.
            return match e.print() {
                Ok(()) if e.use_stderr() => ExitCode::from(1),
                Ok(()) => ExitCode::SUCCESS,
                Err(_) => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
