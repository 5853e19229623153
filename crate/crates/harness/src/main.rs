use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qprune_harness::checkpoint::Checkpoint;
use qprune_harness::config::ExperimentConfig;
use qprune_harness::runner::{self, RunOptions};
use qprune_harness::sweep;
use qprune_harness::Result;

#[derive(Parser)]
#[command(name = "qprune", version, about = "Joint quantization and pruning experiments")]
struct Cli {
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 2)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the config's evaluation split.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run mirrored prune-then-quantize and quantize-then-prune variants.
    SweepOrder { config: PathBuf },
    /// Print a comparison of every run summary under a directory.
    Report { dir: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(runner::with_overrides(cfg, cli.seed, cli.out.clone()))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, resume } => {
            let cfg = load(cli, config)?;
            let summary = runner::run_with(&cfg, RunOptions { resume: *resume, stop_at: None })?
                .expect("runs to completion");
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load(cli, config)?;
            let split = cfg.dataset()?;
            let mut trainer = Checkpoint::load(checkpoint)?.restore(&cfg.plan())?;
            let (metric, footprint, pd) = runner::evaluate(&mut trainer, &split.eval)?;
            let out = serde_json::json!({
                "step": trainer.step(),
                "metric": metric,
                "footprint": footprint,
                "performance_density": pd,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::SweepOrder { config } => {
            let cfg = load(cli, config)?;
            let report = sweep::sweep_order(&cfg, cli.threads)?;
            print!("{}", sweep::render(&report));
        }
        Command::Report { dir } => {
            let report = sweep::collect(dir)?;
            print!("{}", sweep::render(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit 1; 2 is reserved for numerical failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
