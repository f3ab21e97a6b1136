use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use aisp::harness::{run_experiment, validate_config, ExperimentConfig, CONFIG_REFERENCE};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Reward-guided decoding by adaptive importance sampling on pre-logits.
#[derive(Parser)]
#[command(name = "aisp", version, after_long_help = CONFIG_REFERENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(ConfigArgs),
    /// Check a config file and print the normalized config.
    Validate(ConfigArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file (see `aisp --help` for all keys and defaults).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn load(args: &ConfigArgs) -> Result<Result<ExperimentConfig, Vec<String>>> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    Ok(validate_config(&text).map(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.seed = seed;
            cfg.control.seed = seed;
        }
        if let Some(dir) = &args.output_dir {
            cfg.run.output_dir = dir.clone();
        }
        cfg
    }))
}

fn report_violations(errors: &[String]) -> ExitCode {
    eprintln!("invalid config:");
    for e in errors {
        eprintln!("  {e}");
    }
    ExitCode::from(2)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("aisp {}", env!("CARGO_PKG_VERSION"));
        }
        Command::Validate(args) => match load(&args)? {
            Ok(cfg) => println!("{}", cfg.to_json_pretty()),
            Err(errors) => return Ok(report_violations(&errors)),
        },
        Command::Run(args) => match load(&args)? {
            Ok(cfg) => {
                let report = run_experiment(&cfg)?;
                for f in &report.files {
                    println!("{}", f.display());
                }
            }
            Err(errors) => return Ok(report_violations(&errors)),
        },
    }
    Ok(ExitCode::SUCCESS)
}
