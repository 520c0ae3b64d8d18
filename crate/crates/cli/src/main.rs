//! `dfq`: data-free quantization experiments on the toy task.

mod commands;
mod config;
mod imaging;
mod manifest;

use clap::{Parser, Subcommand};
use config::Overrides;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dfq",
    version,
    about = "Quantize a pre-trained classifier without its training data"
)]
struct Cli {
    /// Experiment directory; all artifacts and the manifest live here.
    #[arg(long, short = 'd', global = true, default_value = "runs/default")]
    dir: PathBuf,

    /// Optional TOML config; defaults apply when omitted.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset and write both splits.
    GenData,
    /// Train the full-precision teacher on the train split.
    TrainTeacher,
    /// Quantize the teacher without fine-tuning (no calibration data).
    Quantize,
    /// Full run: generator warm-up, alignment, student fine-tuning.
    DfqRun,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint to evaluate (defaults to the fine-tuned student).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the four-variant ablation and print the table.
    Ablate,
    /// Sweep beta_fd or alpha3 over a value list.
    Sweep {
        /// Parameter to sweep: beta_fd or alpha3.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Repeats (seeds) per value.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Summarize existing artifacts; never trains anything.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match config::ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.dir) {
        eprintln!("error: cannot create {}: {e}", cli.dir.display());
        return ExitCode::from(1);
    }

    let result = match &cli.command {
        Command::GenData => commands::gen_data(&cli.dir, &cfg),
        Command::TrainTeacher => commands::train_teacher(&cli.dir, &cfg),
        Command::Quantize => commands::quantize(&cli.dir, &cfg),
        Command::DfqRun => commands::dfq_run(&cli.dir, &cfg),
        Command::Eval { checkpoint } => commands::eval(&cli.dir, &cfg, checkpoint.as_deref()),
        Command::Ablate => commands::ablate(&cli.dir, &cfg),
        Command::Sweep {
            param,
            values,
            repeats,
        } => commands::sweep(&cli.dir, &cfg, param, values, *repeats),
        Command::Report => commands::report(&cli.dir),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CmdError::MissingArtifact(path)) => {
            eprintln!("error: missing artifact: {path}");
            ExitCode::from(2)
        }
        Err(commands::CmdError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
