use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use martnet::artifacts::Manifest;
use martnet::{run, Command, Context, RunConfig};

#[derive(Parser)]
#[command(name = "martnet", version, about = "Martingale-based neural solver for control and parabolic PDE problems")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Configuration file (key = value lines).
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "manifest")]
    config: Option<PathBuf>,

    /// Rerun with the configuration recorded in a manifest.
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Progress lines on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate and cache the training paths.
    GenPaths,
    /// Train the networks; writes metrics and a checkpoint.
    Train,
    /// Relative errors of a checkpoint against the reference values.
    Eval,
    /// v(0, ·) along the configured curve.
    Curve,
    /// Error against the number of time steps.
    Convergence,
    /// Expected cost of the learned control.
    Cost,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenPaths => Command::GenPaths,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Curve => Command::Curve,
            Cmd::Convergence => Command::Convergence,
            Cmd::Cost => Command::Cost,
        }
    }
}

fn load(cli: &Cli) -> anyhow::Result<RunConfig> {
    let sets = &cli.sets;
    if let Some(path) = &cli.manifest {
        let m = Manifest::load(path)?;
        return Ok(RunConfig::with_sets(&m.config, sets)?);
    }
    match &cli.config {
        Some(path) => Ok(RunConfig::load(path, sets)?),
        None => Ok(RunConfig::with_sets("", sets)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| {
        let mut ctx = Context::new(&cli.out, cli.workers);
        ctx.verbose = cli.verbose;
        run(cli.command.into(), &cfg, &ctx)
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
