//! `recycled`: dataset recycling, training, decoding and evaluation pipeline.

mod commands;
mod failure;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use failure::Failure;

#[derive(Debug, Parser, Serialize)]
#[command(name = "recycled", version, about = "Multi-property extraction pipeline")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Generate a synthetic corpus of multi-property records.
    Synth(SynthArgs),
    /// Train the subword tokenizer (and a truecaser) on records.
    TokenizerTrain(TokenizerTrainArgs),
    /// Merge per-property instances into multi-property records.
    BuildRecycled(BuildArgs),
    /// Partition labels and draft leakage-free train/validation/test splits.
    Split(SplitArgs),
    /// Tag every gold value as exact-match or inferable.
    TagEmIn(TagArgs),
    /// Train a model: positional key=value pairs select and override the config.
    Train(TrainArgs),
    /// Decode records with one checkpoint or an ensemble.
    Decode(DecodeArgs),
    /// Score predictions against gold records.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Audit drafted splits for leakage.
    AuditSplit(AuditArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Split,
    Extraction,
    Leakage,
    LeakageControl,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Property universe size (split corpora only).
    #[arg(long, default_value_t = 40)]
    pub properties: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizerTrainArgs {
    /// Record files (JSONL).
    #[arg(long, required = true, num_args = 1..)]
    pub records: Vec<PathBuf>,
    #[arg(long, default_value_t = 8000)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    /// Per-property instance files (JSONL).
    #[arg(long, required = true, num_args = 1..)]
    pub instances: Vec<PathBuf>,
    #[arg(long, default_value = "id")]
    pub id_field: String,
    #[arg(long, default_value = "text")]
    pub text_field: String,
    #[arg(long, default_value = "property")]
    pub property_field: String,
    #[arg(long, default_value = "values")]
    pub values_field: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Label-set proportions: test-only, validation-only, shared, free.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [0.2, 0.2, 0.1, 0.5])]
    pub proportions: Vec<f64>,
    /// Multiplier on the preset block sizes (1,000 / 1,000 / 2,000 x 4).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Annotator removals (JSONL) applied to validation and test.
    #[arg(long)]
    pub annotation_filter: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TagArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Truecaser stored in the checkpoint for decoding.
    #[arg(long)]
    pub truecaser: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// model=dual|basic, mode=single|multi, preset=desk|paper, then dotted
    /// overrides such as model.depth=3, trainer.adam.lr=0.0005, fit.max_steps=500.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Further checkpoints averaged with the first in probability space.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_norm: f64,
    /// Replace the article with padding (dual model only).
    #[arg(long)]
    pub ablate_article: bool,
    /// Restore case with the checkpoint's truecaser.
    #[arg(long)]
    pub truecase: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold records (JSONL).
    #[arg(long)]
    pub gold: PathBuf,
    /// EM/IN tags from `tag-em-in`.
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub op_seeds: u64,
    #[arg(long, default_value_t = 100)]
    pub model_seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    /// Directory written by `split`.
    #[arg(long)]
    pub split_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return failure::report(&anyhow::Error::new(Failure::Usage(first.to_string())));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => failure::report(&e),
    }
}
