use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use vdm_lab::Command;

/// Variational diffusion experiments.
#[derive(Debug, Parser)]
#[command(name = "vdm-lab", version)]
struct Cli {
    /// One of train, sample, verify, hole-demo, schedule-dump, param-table.
    command: Command,
    /// Path to a `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match vdm_lab::run(cli.command, &cli.config, cli.seed, cli.out) {
        Ok(m) => {
            for (k, v) in &m.metrics {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
