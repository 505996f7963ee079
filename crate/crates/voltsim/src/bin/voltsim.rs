use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use voltsim::cli_io::{run_pipeline, Config, PipelineContext, COMMANDS};

/// Arbitrage-free spot and option market simulator pipeline.
#[derive(Parser)]
#[command(name = "voltsim", version, about)]
struct Cli {
    /// Pipeline stage: synth, fit-surface, train-ae, train-vol, train-flow,
    /// extract-latents, fit-copula, simulate, evaluate, report
    command: String,

    /// Flat key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config seed)
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (default from VOLTSIM_OUT)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Asset name; repeat for multi-asset runs
    #[arg(long = "asset")]
    assets: Vec<String>,

    /// Override one config key, e.g. --set latent_dim=2; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> voltsim::Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for pair in &cli.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            voltsim::VoltError::Config(format!("--set expects KEY=VALUE, got {pair}"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    if !COMMANDS.contains(&cli.command.as_str()) {
        return Err(voltsim::VoltError::Config(format!(
            "unknown command `{}`; expected one of {}",
            cli.command,
            COMMANDS.join(", ")
        )));
    }
    let ctx = PipelineContext::new(config, cli.out.clone(), cli.assets.clone())?;
    run_pipeline(&cli.command, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voltsim: {e}");
            ExitCode::FAILURE
        }
    }
}
