use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use snctl::output::{write_error, write_run};
use snctl::{run, Command, Manifest, RunConfig, RunError};

#[derive(Parser, Debug)]
#[command(name = "snctl", version, about = "Hierarchical control experiments for clamped fourth-order parabolic equations")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the width of parallel sweeps.
    #[arg(long)]
    threads: Option<usize>,
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config).map_err(RunError::from)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let manifest = Manifest::new(cli.command, &cfg, threads).map_err(RunError::from)?;
    let art = run(cli.command, &cfg)?;
    write_run(&cli.out, &manifest, &art).with_context(|| format!("writing {}", cli.out.display()))?;
    println!("{}: wrote {}", cli.command.name(), cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.downcast_ref::<RunError>().map_or("io", RunError::kind);
            eprintln!("error: {err:#}");
            if let Err(e) = write_error(&cli.out, kind, format!("{err:#}")) {
                eprintln!("error: could not write error record: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
