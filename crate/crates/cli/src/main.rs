//! `plutonet`: synthetic data, training, ablation, evaluation, prediction and
//! parameter audits.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "plutonet", version, about = "Train and evaluate PlutoNet polyp-segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set train.max_epochs=5`. Dotted
    /// flags such as `--train.max_epochs=5` are accepted too.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic polyp corpus.
    Synth {
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output corpus directory (gets images/, masks/, manifest.json).
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
        /// Side length of the generated images in pixels.
        #[arg(long, default_value_t = 224)]
        size: u32,
    },
    /// Train one model and score it on the test split.
    Train(ConfigArgs),
    /// Train the no-consistency and with-consistency arms and report both.
    Ablate(ConfigArgs),
    /// Score a checkpoint on a corpus split.
    Eval {
        /// Checkpoint directory (holding model.safetensors and manifest.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Which recorded split to score: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Probability threshold; defaults to the checkpoint's.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Directory for metrics.csv and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write probability maps, binary masks and overlays for a folder of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of png or jpg images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Optional ground-truth masks (matched by file stem) drawn as outlines.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Print the per-component parameter breakdown.
    Params {
        /// Configuration file; the defaults are used when neither this nor a checkpoint is given.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also list every tensor name and shape.
        #[arg(long)]
        names: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Move `--section.key=value` (or `--section.key value`) flags into a
/// separate list of overrides.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(s) if s.contains('=') => overrides.push(s.to_string()),
            Some(s) => match it.next_if(|n| !n.starts_with("--")) {
                Some(v) => overrides.push(format!("{s}={v}")),
                None => overrides.push(s.to_string()),
            },
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, extra) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command, extra) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
