use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Sentence-pair scoring with pre-computed candidate embeddings.
#[derive(Debug, Parser)]
#[command(name = "mixenc", version)]
pub struct Cli {
    /// Seed for corpus generation, initialization, shuffling and benchmarks.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON file with optional [model], [train], [gen] and [bench] tables.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Architecture. `mix` is accepted as an alias of `mix-a`.
    #[arg(long, global = true, value_parser = ["mix-a", "mix-b", "mix-c", "dual", "cross", "poly", "maxsim", "mix"])]
    pub model: Option<String>,
    /// Floating-point width of all computation.
    #[arg(long, global = true, value_enum, default_value = "32")]
    pub float: Float,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Float {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as JSON lines.
    Gen(GenArgs),
    /// Build a candidate cache from a checkpoint and a corpus.
    Precompute(PrecomputeArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Compute ranking metrics or accuracy.
    Eval(EvalArgs),
    /// Measure scoring latency against the number of candidates.
    Bench(BenchArgs),
    /// Evaluate the closed-form attention cost of an architecture.
    Cost(CostArgs),
    /// Train and evaluate the ablation switches side by side.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = ["ranking", "classification", "token-overlap"])]
    pub task: Option<String>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub query_len: Option<usize>,
    #[arg(long)]
    pub candidate_len: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Added to every query id, so separately generated splits do not share ids.
    #[arg(long)]
    pub first_query_id: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write the vocabulary as `token<TAB>id` lines.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Candidates encoded per pass.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out corpus evaluated after every epoch.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Metrics log, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
    pub checkpoint: Option<PathBuf>,
    /// Pre-computed scores instead of a model: JSON lines of
    /// `{"query_id": .., "scores": [[candidate_id, score], ..]}`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Candidate cache built by `precompute`; MixEncoder only.
    #[arg(long, requires = "checkpoint")]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Candidate counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Models, comma separated; overrides --model.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    /// Full report as JSON.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Hidden size.
    #[arg(long)]
    pub h: u64,
    /// Query length.
    #[arg(long)]
    pub q: u64,
    /// Candidate length; defaults to the query length.
    #[arg(long)]
    pub d: Option<u64>,
    /// Context embeddings per candidate.
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    /// Candidates per query.
    #[arg(long)]
    pub nc: u64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Runs to include, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "original,without-h,without-e,eq6",
        value_parser = ["original", "without-h", "without-e", "eq6"]
    )]
    pub runs: Vec<String>,
    /// Directory for one checkpoint per run.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
