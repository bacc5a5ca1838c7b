//! `classkit` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (unknown flag, unknown or malformed configuration key).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use classkit::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "classkit", version, about = "Salient object detection with cross-level attention and supervision")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration: a `key = value` file plus `--set` overrides.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Configuration file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (PPM images, PGM masks, manifest).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Square side in pixels, a multiple of 16.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Index of the first sample; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Split tag recorded in the manifest: train, val or test.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and loss logs every epoch.
    Train {
        /// Training dataset directory (containing manifest.txt).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset directory, evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against a dataset; writes metrics.csv and pr_curve.csv.
    Eval {
        /// Dataset directory with the ground-truth masks.
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<id>.pgm` predictions.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        /// Checkpoint to predict with instead of --pred.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; exits 1 if any case fails.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random instances per case.
        #[arg(long, default_value_t = classkit::suite::DEFAULT_INSTANCES)]
        instances: usize,
        /// Only run cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Predict saliency maps for every PPM image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the attention maps of one image as PGMs.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the ten-row ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated grid rows (1 to 10); all when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn config_help() -> String {
    format!("Configuration keys (name, default, meaning):\n{}", RunConfig::help())
}

fn main() -> ExitCode {
    let help = config_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("ablate", |c| c.after_help(help.clone()));
    let parsed = cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
