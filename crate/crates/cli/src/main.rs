use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use iap_cli::commands::run_to_destination;
use iap_cli::{parse_config, Command};

#[global_allocator]
static ALLOC: iap_core::alloc_stats::CountingAllocator = iap_core::alloc_stats::CountingAllocator;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Bench,
    Accuracy,
    Train,
    Eval,
    Diversity,
    Flow,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Bench => Command::Bench,
            Cmd::Accuracy => Command::Accuracy,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Diversity => Command::Diversity,
            Cmd::Flow => Command::Flow,
        }
    }
}

/// Implicit attention benchmarks, accuracy sweeps, demos and ES training.
#[derive(Debug, Parser)]
#[command(name = "iap", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = parse_config(&args.config, args.command.into()).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(o) = args.out {
            cfg.out = Some(o);
        }
        run_to_destination(&cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
