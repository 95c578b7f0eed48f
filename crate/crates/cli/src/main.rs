use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hierassim_cli::{diag, gen_truth, run, DiagArgs, GenTruthArgs, Method, RunArgs};

#[derive(Parser)]
#[command(name = "hierassim", version, about = "Hierarchical data-assimilation twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (or read) the true hyperparameters and write the truth bundle.
    GenTruth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one sampler against a truth bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Directory written by gen-truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for forward runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Compare run directories with a reference run.
    Diag {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTruth { config, out, seed } => gen_truth(&GenTruthArgs { config, out, seed }).map(|t| {
            println!(
                "truth mu_logk={} sigma_logk={} log10_ar={}",
                t.hyper.mu_logk, t.hyper.sigma_logk, t.hyper.log10_ar
            )
        }),
        Command::Run {
            config,
            method,
            truth,
            out,
            seed,
            workers,
        } => run(&RunArgs {
            config,
            method,
            truth,
            out,
            seed,
            workers,
        })
        .map(|l| println!("{} finished: {} forward runs", l.method, l.simulate_calls)),
        Command::Diag { reference, runs, out } => {
            diag(&DiagArgs { reference, runs, out }).map(|r| println!("{} divergence rows", r.js.len()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
