use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(
    name = "moepf",
    version,
    about = "Expert-routing speculation and offloading experiments"
)]
struct Cli {
    /// root seed; every stage derives its own sub-seed from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads for evaluation (recorded; evaluation is currently serial)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a seeded toy model bundle.
    GenModel(GenModelArgs),
    /// Record decode signals over a token stream.
    Trace(TraceArgs),
    /// Aggregate per-expert mean outputs from a trace.
    DefaultVectors(DefaultVectorsArgs),
    /// Score a next-layer predictor against a trace.
    Speculate(SpeculateArgs),
    /// Distill a next-layer router estimator from a trace.
    TrainEstimator(TrainArgs),
    /// Run the discrete-event latency model.
    Simulate(SimulateArgs),
    /// Decode with real host/device copy lanes.
    E2e(E2eArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenModelArgs {
    /// `toy` or `toy-large`
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    /// model config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// text file, tokenized byte by byte
    #[arg(long, conflicts_with = "random_tokens", required_unless_present = "random_tokens")]
    pub corpus: Option<PathBuf>,
    /// number of uniformly random tokens
    #[arg(long)]
    pub random_tokens: Option<usize>,
    /// decode state is reset every `window` tokens
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    /// comma-separated subset of tokens,s,r,m,router_logits,ids,gates,expert_out
    #[arg(long, value_delimiter = ',')]
    pub fields: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DefaultVectorsArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictorArgs {
    #[arg(long, default_value = "router-pf")]
    pub predictor: String,
    #[arg(long)]
    pub default_vectors: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    /// JSON object mapping source layer to baseline-s, router-pf or est-pf
    #[arg(long)]
    pub hybrid_map: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SpeculateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputArg {
    Quasi,
    NextRouterInput,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    /// required for quasi inputs
    #[arg(long)]
    pub default_vectors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "quasi")]
    pub input: InputArg,
    /// training hyper-parameter JSON; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// estimator reduction factor
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// estimator expansion factor
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SimMode {
    OnDemand,
    Prefetch,
    Both,
    Analytic,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// preset name (uniform, balanced, qwen3-30b-a3b, ...) or timing JSON path
    #[arg(long)]
    pub timing: String,
    /// experts per token; required by geometry presets
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: SimMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum E2eMode {
    OnDemand,
    Prefetch,
    Both,
}

#[derive(Args, Debug, Serialize)]
pub struct E2eArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long, default_value_t = 0)]
    pub copy_latency_us: u64,
    /// split the copy delay evenly across the experts of a layer
    #[arg(long)]
    pub per_expert: bool,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: E2eMode,
    #[arg(long, default_value = "The ")]
    pub prompt: String,
    #[arg(long, default_value_t = 32)]
    pub new_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub struct Globals {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Bad flags, configs, or missing artifacts (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use moe_prefetch::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Missing(_) | E::Empty(_) | E::Distribution(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = Globals {
        seed: cli.seed,
        threads: cli.threads,
    };
    let result = match &cli.command {
        Command::GenModel(a) => commands::gen_model(&g, a),
        Command::Trace(a) => commands::trace(&g, a),
        Command::DefaultVectors(a) => commands::default_vectors(&g, a),
        Command::Speculate(a) => commands::speculate(&g, a),
        Command::TrainEstimator(a) => commands::train_estimator(&g, a),
        Command::Simulate(a) => commands::simulate(&g, a),
        Command::E2e(a) => commands::e2e(&g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
