//! Command-line driver for the facelm toolkit: instruction generation,
//! adapter training, closed-set evaluation, and ablation sweeps, all under
//! one binary with shared configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error,
//! 4 partial completion (an evaluation finished but some samples failed).
//! Failures print a single-line machine-readable JSON object to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "facelm",
    version,
    about = "Expression-aware instruction tuning: data generation, training, evaluation, ablations"
)]
struct Cli {
    /// Log verbosity: -v info, -vv debug (default: warnings only)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an instruction dataset (category + conversation JSONL)
    Gen(GenArgs),
    /// Train the adapter stack on an instruction dataset
    Train(TrainArgs),
    /// Evaluate closed-set expression recognition from a checkpoint
    Eval(EvalArgs),
    /// Train/evaluate the cross-product of feature toggles
    Ablate(AblateArgs),
}

/// Feature-toggle overrides shared by training-style subcommands. Each
/// flag flips one ablation axis off (or, for descriptions, on) relative to
/// the loaded configuration.
#[derive(Args, Clone, Default)]
struct ToggleArgs {
    /// Disable the facial token branch (visual tokens only)
    #[arg(long)]
    no_facial_embedding: bool,

    /// Disable the per-frame landmark token
    #[arg(long)]
    no_landmark_token: bool,

    /// Disable the demographic-attribute prompt line
    #[arg(long)]
    no_agr_prompt: bool,

    /// Disable region-masked local attention inside feature mining
    #[arg(long)]
    no_local_attention: bool,

    /// Sample category instructions uniformly instead of inverse-frequency
    #[arg(long)]
    no_sampler: bool,

    /// Force descriptive text into prompts
    #[arg(long, conflicts_with = "no_description")]
    with_description: bool,

    /// Strip descriptive text from prompts
    #[arg(long)]
    no_description: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Existing dataset directory (contains dataset.json)
    #[arg(long, conflicts_with = "fixtures")]
    data: Option<PathBuf>,

    /// Build a synthetic corpus under <out>/dataset first:
    /// tiny | seven | imbalanced | face-only | videos
    #[arg(long)]
    fixtures: Option<String>,

    /// Samples per class for fixture presets
    #[arg(long, default_value_t = 20)]
    per_class: usize,

    /// Run directory: receives instructions.jsonl, manifest.json, snapshots
    #[arg(long)]
    out: PathBuf,

    /// Base configuration file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Generation seed (default: the configuration's model seed)
    #[arg(long)]
    seed: Option<u64>,

    /// Use the offline deterministic generator
    #[arg(long)]
    mock: bool,

    /// Remote generation endpoint (HTTP POST, JSON in, text out)
    #[arg(long, conflicts_with = "mock")]
    endpoint: Option<String>,

    /// Environment variable holding the endpoint bearer token
    #[arg(long, default_value = "FACELM_API_KEY")]
    api_key_env: String,

    /// Request pacing for the remote endpoint
    #[arg(long, default_value_t = 2.0)]
    requests_per_second: f64,

    /// Remote request timeout
    #[arg(long, default_value_t = 30)]
    timeout_seconds: u64,

    /// Instruction kinds to emit: category, conversation (default: both)
    #[arg(long, value_delimiter = ',')]
    kinds: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (contains dataset.json)
    #[arg(long)]
    data: PathBuf,

    /// Instruction JSONL produced by `gen`
    #[arg(long)]
    instructions: PathBuf,

    /// Run directory: receives checkpoint/, config.toml, run.json
    #[arg(long)]
    out: PathBuf,

    /// Base configuration file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override both the model-init and training seeds
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    /// Learning rate override
    #[arg(long)]
    lr: Option<f64>,

    /// Restrict training to these instruction kinds (category, conversation)
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,

    #[command(flatten)]
    toggles: ToggleArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (contains dataset.json)
    #[arg(long)]
    data: PathBuf,

    /// Checkpoint directory from `train` (required with --responder model)
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Run directory: receives records.jsonl, report.json, recall.svg
    #[arg(long)]
    out: PathBuf,

    /// in-domain | cross-image-to-video | cross-video-to-image | zero-shot
    #[arg(long, default_value = "in-domain")]
    mode: String,

    /// Inject sample descriptions into prompts
    #[arg(long, conflicts_with = "no_description")]
    with_description: bool,

    /// Never inject sample descriptions
    #[arg(long)]
    no_description: bool,

    /// Override the closed-set question
    #[arg(long)]
    question: Option<String>,

    /// model | oracle | random (oracle/random need no checkpoint)
    #[arg(long, default_value = "model")]
    responder: String,

    /// Seed for the random responder
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (contains dataset.json)
    #[arg(long)]
    data: PathBuf,

    /// Instruction JSONL produced by `gen`
    #[arg(long)]
    instructions: PathBuf,

    /// Run directory: receives ablation.json and one row directory per cell
    #[arg(long)]
    out: PathBuf,

    /// Base configuration file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override both the model-init and training seeds
    #[arg(long)]
    seed: Option<u64>,

    /// Toggle axes to sweep on/off (comma-separated): facial-embedding,
    /// landmark-token, agr-prompt, local-attention, sampler,
    /// descriptive-text. Empty: a single baseline row.
    #[arg(long, value_delimiter = ',')]
    axes: Vec<String>,

    #[arg(long)]
    epochs: Option<usize>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match commands::run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let payload = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{payload}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
