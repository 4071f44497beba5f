use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cso::commands::{error_record, run_command, Command};
use cso::config::{load_config, RunConfig};
use cso::error::Result;

#[derive(Debug, Parser)]
#[command(name = "cso", version, about = "Critical step optimization on a synthetic tool-use world")]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this master seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env(|k| std::env::var(k).ok())?;
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match resolve(&cli).and_then(|cfg| run_command(&cli.command, &cfg)) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = error_record(cli.command.name(), &e);
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
