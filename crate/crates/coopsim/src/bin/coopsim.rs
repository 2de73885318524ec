//! Thin CLI over the coopsim harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "coopsim",
    about = "V2X cooperative driving simulator and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scenario file from a scenario config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment config; writes <out>/run.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis over a list of values; writes <out>/sweep.json.
    Sweep {
        /// bandwidth | latency | corruption
        #[arg(long)]
        axis: String,
        /// Comma-separated values (Mb/s, seconds, or drop fractions).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a run/sweep directory as csv, markdown, or json.
    Report {
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long)]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Gen { config, out } => coopsim::harness::cmd_gen(config, out),
        Cmd::Run { config, out } => coopsim::harness::cmd_run(config, out),
        Cmd::Sweep {
            axis,
            values,
            config,
            out,
        } => coopsim::harness::cmd_sweep(axis, values, config, out),
        Cmd::Report { in_dir, format } => coopsim::harness::cmd_report(in_dir, format).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
