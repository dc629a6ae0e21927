use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use mdps_cli::{cmd_evaluate, cmd_export_slices, cmd_phantom, cmd_reconstruct, cmd_simulate, config};
use mdps_core::solver::threads_from_env;

/// Simulation, motion-compensated reconstruction and evaluation runs.
#[derive(Parser)]
#[command(name = "mdps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the ground-truth phantom and coil maps.
    Phantom(Common),
    /// Write k-space, sampling plan, true trajectory and the zero-filled baseline.
    Simulate(Common),
    /// Run the joint reconstruction.
    Reconstruct(Common),
    /// Compute metrics of the reconstruction and the baseline.
    Evaluate(Common),
    /// Write central slices as PNG and trajectory CSVs.
    ExportSlices(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point: test, recovery or paperlike.
    #[arg(long, default_value = "test")]
    preset: String,
    /// Override a field by dotted path, e.g. `solver.schedule.num_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; replaces `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    let (common, stage): (&Common, fn(&_) -> _) = match &cli.command {
        Command::Phantom(c) => (c, cmd_phantom),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Reconstruct(c) => (c, cmd_reconstruct),
        Command::Evaluate(c) => (c, cmd_evaluate),
        Command::ExportSlices(c) => (c, cmd_export_slices),
    };
    let cfg = config::resolve(&common.preset, common.config.as_deref(), &common.overrides, common.out.as_deref())?;
    let outcome = stage(&cfg)?;
    info!("wrote {} files to {}", outcome.written.len(), cfg.output_dir.display());
    if !outcome.clean {
        warn!("solver reported backtracking or CG failures; see {}", mdps_cli::SUMMARY);
    }
    Ok(outcome.clean)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
