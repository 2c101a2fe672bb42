//! `momentprop` command-line driver.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use momentprop::Error;

use args::Cli;

// The forward passes allocate per chunk; the system allocator hands large
// blocks back to the kernel and pays page faults on every call.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Usage and configuration problems.
const EXIT_USAGE: u8 = 2;
/// Missing, malformed or incompatible input files.
const EXIT_DATA: u8 = 3;
/// Divergence or non-finite numbers.
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::InvalidArgument(_) | Error::IncompatibleMode { .. } => EXIT_USAGE,
        Error::Shape(_)
        | Error::MalformedModel(_)
        | Error::VersionMismatch { .. }
        | Error::Checksum { .. }
        | Error::Data(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
