//! `pvp` — staged pipeline driver.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pvp_core::pipeline::{
    apply_seed_override, load_config, OutputLock, Pipeline, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "pvp",
    version,
    about = "Counterfactual-image workbench: dataset generation, toy multimodal \
             transformer training, layer-wise tracing, steering and reports"
)]
struct Cli {
    /// Path to the JSON run config.
    #[arg(long, global = true, default_value = "pvp.json")]
    config: PathBuf,

    /// Output root directory (falls back to $PVP_OUT, then ./pvp-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a stage seed, e.g. --seed-override train=7. Repeatable.
    #[arg(long = "seed-override", global = true, value_name = "STAGE=N")]
    seed_overrides: Vec<String>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits.
    Gen,
    /// Train the model and write a checkpoint.
    Train,
    /// Evaluate the 2x2 accuracy grid.
    Eval,
    /// Layer-wise decode traces and flip statistics.
    Trace,
    /// Steering-vector operations.
    Steer {
        #[command(subcommand)]
        command: SteerCommand,
    },
    /// Attention-mass deltas: intervention vs prompt change.
    Attn,
    /// PCA projection of steered and unsteered states.
    Pca,
    /// Emit all report artifacts and the acceptance summary.
    Report,
    /// Re-evaluate every acceptance property from the artifacts.
    Verify,
}

#[derive(Subcommand)]
enum SteerCommand {
    /// Fit steering vectors on the steer-fit split.
    Fit,
    /// Grid-search the intervention window per task and direction.
    Search,
    /// Measure flip rates on the originally-incorrect eval sets.
    Eval,
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("PVP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pvp-out"))
}

fn run(cli: Cli) -> pvp_core::Result<bool> {
    let mut config: RunConfig = if cli.config.exists() {
        load_config(&cli.config)?
    } else if cli.config.as_os_str() == "pvp.json" {
        // No config file: run on documented defaults.
        RunConfig::default()
    } else {
        return Err(pvp_core::PvpError::Config(format!(
            "config file {} does not exist",
            cli.config.display()
        )));
    };
    for spec in &cli.seed_overrides {
        apply_seed_override(&mut config, spec)?;
    }
    config.validate()?;

    let root = out_root(&cli);
    let _lock = OutputLock::acquire(&root)?;
    let pipeline = Pipeline::new(config, &root, cli.quiet)?;

    match cli.command {
        Command::Gen => pipeline.gen().map(|_| true),
        Command::Train => pipeline.train().map(|_| true),
        Command::Eval => pipeline.eval().map(|_| true),
        Command::Trace => pipeline.trace().map(|_| true),
        Command::Steer { command } => match command {
            SteerCommand::Fit => pipeline.steer_fit().map(|_| true),
            SteerCommand::Search => pipeline.steer_search().map(|_| true),
            SteerCommand::Eval => pipeline.steer_eval().map(|_| true),
        },
        Command::Attn => pipeline.attn().map(|_| true),
        Command::Pca => pipeline.pca().map(|_| true),
        Command::Report => pipeline.report().map(|_| true),
        Command::Verify => pipeline.verify(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("pvp: verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("pvp: {e}");
            ExitCode::FAILURE
        }
    }
}
