//! `qrt`: index, search, curate, score rewards, train the toy policy, and
//! evaluate rewrites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 remote-provider
//! failure.

mod commands;
mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use config::AppConfig;
use error::Failure;

#[derive(Parser, Debug)]
#[command(name = "qrt", version, about = "Query-rewrite retrieval toolkit")]
pub struct Cli {
    /// Configuration file of key=value lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed (configuration key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a BM25 index from a documents file.
    Index(IndexArgs),
    /// Retrieve with BM25 and write a TREC run.
    Search(SearchArgs),
    /// Build a training set from question/answer records.
    Curate(CurateArgs),
    /// Relevance-increment rewards.
    #[command(subcommand)]
    Reward(RewardCommand),
    /// Train the tabular expansion policy with GRPO.
    TrainToy(TrainArgs),
    /// Retrieve with rewritten queries and report nDCG@k.
    RewriteEval(RewriteEvalArgs),
    /// Compare two evaluation reports.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Documents, JSON-lines {"id", "text"}.
    #[arg(long)]
    pub docs: PathBuf,
    /// Output directory for the index snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Accept documents with empty text.
    #[arg(long)]
    pub allow_empty_text: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Index directory or snapshot file.
    #[arg(long)]
    pub index: PathBuf,
    /// Queries, JSON-lines {"id", "text"}.
    #[arg(long)]
    pub queries: PathBuf,
    /// Results per query (bm25.depth).
    #[arg(long)]
    pub k: Option<usize>,
    /// Run file; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run tag written in the last column.
    #[arg(long, default_value = "bm25")]
    pub tag: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurateMode {
    V1,
    V2,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    #[arg(long, value_enum)]
    pub mode: CurateMode,
    /// Question/answer records, JSON-lines.
    #[arg(long)]
    pub records: PathBuf,
    /// JSON object of category -> cap; defaults to the built-in list for the mode.
    #[arg(long)]
    pub caps: Option<PathBuf>,
    /// Generated answers for v1, JSON-lines {"question_id", "text"}.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Extra payload marker for the text-only filter; repeatable. Replaces the defaults.
    #[arg(long = "marker")]
    pub markers: Vec<String>,
    /// Training samples output.
    #[arg(long)]
    pub out: PathBuf,
    /// Curation report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum RewardCommand {
    /// Score rewrites against their training samples.
    Score(RewardArgs),
}

#[derive(Args, Debug)]
pub struct RewardArgs {
    /// Training samples; sample ids are s0, s1, ... in file order.
    #[arg(long)]
    pub samples: PathBuf,
    /// Rewrites, JSON-lines {"id": sample id, "text"}; several per id allowed.
    #[arg(long)]
    pub rewrites: PathBuf,
    /// Reward records output; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// reward.mode
    #[arg(long)]
    pub mode: Option<String>,
    /// reward.content
    #[arg(long)]
    pub content: Option<String>,
    /// reward.max_completion_tokens
    #[arg(long)]
    pub max_completion_tokens: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training samples. Mutually exclusive with --synthetic.
    #[arg(long, conflicts_with = "synthetic", requires = "vocab")]
    pub train: Option<PathBuf>,
    /// Expansion vocabulary, one term per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Train on the built-in synthetic expansion task (30 samples, 32 terms).
    #[arg(long, required_unless_present = "train")]
    pub synthetic: bool,
    /// Write the synthetic task's documents, queries, qrels and samples here.
    #[arg(long, requires = "synthetic")]
    pub task_out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub clip_epsilon: Option<f64>,
    #[arg(long)]
    pub kl_beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// uniform | variance-scaled
    #[arg(long)]
    pub group_weight: Option<String>,
    /// group-sum | token-mean
    #[arg(long)]
    pub loss_aggregation: Option<String>,
    #[arg(long)]
    pub epochs_per_batch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub expansion_length: Option<usize>,
    /// Training log, JSON-lines; standard output if absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Policy checkpoint output.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Greedy rewrites of the training queries, JSON-lines {"id", "text"}.
    #[arg(long)]
    pub rewrites_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RewriteEvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Judgments, `query_id<TAB>doc_id<TAB>grade`.
    #[arg(long)]
    pub qrels: PathBuf,
    /// Rewrites, JSON-lines {"id", "text"}; original queries if neither this nor --policy is given.
    #[arg(long, conflicts_with = "policy")]
    pub rewrites: Option<PathBuf>,
    /// Policy checkpoint whose greedy rewrites are evaluated.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// nDCG cutoff (eval.k).
    #[arg(long)]
    pub k: Option<usize>,
    /// Documents retrieved per query (bm25.depth).
    #[arg(long)]
    pub depth: Option<usize>,
    /// eval.skip_unjudged
    #[arg(long)]
    pub skip_unjudged: bool,
    /// Write the run here.
    #[arg(long)]
    pub run_out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[arg(long, default_value = "rewrite")]
    pub tag: String,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Baseline report (JSON from rewrite-eval).
    pub a: PathBuf,
    /// Candidate report.
    pub b: PathBuf,
    /// Write the comparison as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn command() -> clap::Command {
    let help = config::help_text();
    Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()))
}

fn load_config(cli: &Cli) -> Result<AppConfig, Failure> {
    let mut cfg = AppConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let result = load_config(&cli).and_then(|mut cfg| commands::dispatch(cli.command, &mut cfg));
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("qrt: {f}");
            f.exit_code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}
