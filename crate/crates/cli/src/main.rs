//! `waveformer`: batch driver for the ECG transformer pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "waveformer", version, about = "Multi-label ECG classification with a waveform transformer")]
pub struct Cli {
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled synthetic ECG records, a class map and a weight matrix.
    Synth(SynthArgs),
    /// Scan a directory of `.hea` headers and write a labelled manifest CSV.
    Manifest(ManifestArgs),
    /// Assign manifest records to stratified cross-validation folds.
    Folds(FoldsArgs),
    /// Train one model per fold and write checkpoints, thresholds and loss curves.
    Train(TrainArgs),
    /// Score trained folds and print per-fold challenge metric with mean ± sd.
    Evaluate(EvaluateArgs),
    /// Write class probabilities for one record.
    Predict(PredictArgs),
    /// Export attention heatmaps for one record.
    Attention(AttentionArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of records.
    #[arg(long, default_value_t = 8)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `full` for the bundled 26-class map, or k in 1..=6 for the first k synthetic codes.
    #[arg(long, default_value = "full")]
    pub classes: String,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 500.0)]
    pub rate: f64,
    /// Shortest record in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub min_duration: f64,
    /// Longest record in seconds.
    #[arg(long, default_value_t = 20.0)]
    pub max_duration: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Unlabeled {
    /// Keep records without a mapped diagnosis as all-negative rows.
    Include,
    /// Drop records without a mapped diagnosis.
    Exclude,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Root directory searched recursively for `.hea` files.
    #[arg(long)]
    pub data: PathBuf,
    /// Class map CSV (`code,class_index,class_code`).
    #[arg(long)]
    pub class_map: PathBuf,
    /// Manifest CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Unlabeled::Include)]
    pub unlabeled: Unlabeled,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold CSV to write (`record_id,fold`).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold CSV from `folds`.
    #[arg(long)]
    pub folds: PathBuf,
    /// Class weight matrix CSV.
    #[arg(long)]
    pub weights: PathBuf,
    /// Run directory; receives run.ini, cv_report.csv and one directory per fold.
    #[arg(long)]
    pub out: PathBuf,
    /// INI configuration with [model], [preprocess], [train] and [features] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.max_steps=200`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Train only this fold instead of all of them.
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    /// Records held out from each fold's training.
    Validation,
    /// Records each fold trained on.
    Train,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub folds: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Run directory written by `train`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, value_enum, default_value_t = PartitionArg::Validation)]
    pub partition: PartitionArg,
    /// Report CSV to write; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Record header (`.hea`).
    #[arg(long)]
    pub record: PathBuf,
    /// Fold directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV to write; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Pgm,
    Svg,
    Csv,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    /// Patch tokens only.
    Patch,
    /// Class token plus patch tokens.
    Full,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Record header (`.hea`).
    #[arg(long)]
    pub record: PathBuf,
    /// Fold directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder layer, zero-based; defaults to the last.
    #[arg(long)]
    pub layer: Option<usize>,
    /// `mean` over heads or a zero-based head index.
    #[arg(long, default_value = "mean")]
    pub head: String,
    #[arg(long, value_enum, default_value_t = FormatArg::All)]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value_t = RegionArg::Patch)]
    pub region: RegionArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
