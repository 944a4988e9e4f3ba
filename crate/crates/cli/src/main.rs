mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use error::Kind;

/// Streaming speech recognition: masked-prediction pre-training, CTC
/// fine-tuning, chunked decoding and evaluation.
#[derive(Debug, Parser)]
#[command(name = "streamrq", version, args_override_self = true)]
pub struct Cli {
    /// TOML file; top-level keys set global flags, `[<subcommand>]` tables set that command's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Run single-threaded even when built with the parallel feature.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-prediction pre-training of a fresh encoder.
    Pretrain(PretrainArgs),
    /// CTC fine-tuning from a pre-trained (or fresh) encoder.
    Finetune(FinetuneArgs),
    /// Offline decoding of a manifest to JSONL hypotheses.
    Decode(DecodeArgs),
    /// Simulated live decoding of one WAV file.
    Stream(StreamArgs),
    /// WER report with a per-role breakdown.
    Evaluate(EvaluateArgs),
    /// WER over a grid of chunk sizes and left contexts, as CSV.
    Sweep(SweepArgs),
    /// Train a word n-gram LM and write it as ARPA.
    LmTrain(LmTrainArgs),
    /// Write a seeded synthetic corpus (WAVs, manifests, LM text).
    SynthCorpus(SynthArgs),
}

/// Context policy flags: `--context full` or `--chunk-size N [--left-chunks M|full]`.
#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub left_chunks: Option<String>,
}

/// Dynamic chunk schedule used when no fixed policy is given.
#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    /// pretrain (mixed), finetune (always chunked) or offline (always full).
    #[arg(long)]
    pub policy_phase: Option<String>,
    #[arg(long, default_value_t = 0.40)]
    pub p_full: f64,
    #[arg(long, default_value_t = 8)]
    pub chunk_min: usize,
    #[arg(long, default_value_t = 32)]
    pub chunk_max: usize,
    #[arg(long, default_value_t = 0.75)]
    pub p_limited_left: f64,
    #[arg(long, default_value_t = 2)]
    pub left_min: usize,
    #[arg(long, default_value_t = 32)]
    pub left_max: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f32,
    #[arg(long, default_value_t = 0.98)]
    pub beta2: f32,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    pub warmup: u64,
    /// Global gradient-norm clip (0 disables).
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f32,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 8192)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 16)]
    pub code_dim: usize,
    #[arg(long, default_value_t = 0.15)]
    pub mask_p_start: f64,
    #[arg(long, default_value_t = 4)]
    pub mask_span: usize,
    #[arg(long, default_value_t = 0.1)]
    pub mask_noise_std: f32,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Loss log (CSV); stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out manifest scored (greedy) after training.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Pre-trained or fine-tuned checkpoint; a fresh encoder from `--preset` otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_encoder: f32,
    #[arg(long, default_value_t = 8e-4)]
    pub lr_head: f32,
    #[arg(long, default_value_t = 1024)]
    pub probe_hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub probe_layers: usize,
    #[arg(long, default_value_t = 0.15)]
    pub probe_dropout: f32,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BeamArgs {
    /// Beam width; greedy decoding when omitted.
    #[arg(long)]
    pub beam: Option<usize>,
    /// ARPA language model for shallow fusion.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StreamArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub chunk_size: usize,
    #[arg(long, default_value = "full")]
    pub left_chunks: String,
    /// Audio pushed per call, in milliseconds.
    #[arg(long, default_value_t = 100.0)]
    pub pushes_ms: f64,
    /// Print only the final transcript.
    #[arg(long)]
    pub final_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// Per-utterance hypotheses (JSONL).
    #[arg(long)]
    pub hyps: Option<PathBuf>,
    /// Emit the report as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, num_args = 1.., value_delimiter = ',', action = ArgAction::Set, default_values_t = [8usize, 16, 32])]
    pub chunk_sizes: Vec<usize>,
    #[arg(long, num_args = 1.., value_delimiter = ',', action = ArgAction::Set, default_values = ["2", "4", "full"])]
    pub left_contexts: Vec<String>,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LmTrainArgs {
    /// Text files, one sentence per line.
    #[arg(long, num_args = 1.., action = ArgAction::Set, required = true)]
    pub text: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    #[arg(long, default_value_t = 0.75)]
    pub discount: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    /// Extra text-only phrases for the LM file.
    #[arg(long, default_value_t = 500)]
    pub lm_lines: usize,
    #[arg(long, default_value_t = 48)]
    pub max_chars: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let args = match config::merge_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(Kind::Usage.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage.exit_code() as u8) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
