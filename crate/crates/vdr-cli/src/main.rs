//! `vdr` — train, index, search, evaluate, and inspect sparse lexical
//! retrieval models from the command line.

mod commands;
mod config;
mod util;

use std::collections::HashSet;
use std::path::PathBuf;

use clap::{ArgAction, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "vdr",
    version,
    about = "Sparse lexical retrieval: vocabulary-space encoder, inverted index, evaluation",
    args_override_self = true,
    after_help = "Every subcommand accepts --config FILE (UTF-8 `key = value` lines, `#` comments);\n\
                  keys are the subcommand's long flag names and command-line flags override the file."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Parametric,
    Nonparametric,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecayArg {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Elu1p,
    Relu,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder on a JSONL pairs file and write a checkpoint.
    Train(TrainArgs),
    /// Embed a corpus and dump `id<TAB>dim:weight...` lines (and optionally
    /// corpus-level token statistics).
    Embed(EmbedArgs),
    /// Embed a corpus with a trained encoder and build an inverted index.
    Index(IndexArgs),
    /// Run queries against an index and write a TREC run file.
    Search(SearchArgs),
    /// Score a run file against qrels (NDCG/Recall/MRR), optionally with a
    /// paired significance test against a second run.
    Eval(EvalArgs),
    /// Measure per-query latency and exact work counters, or sweep the
    /// query-side activation budget.
    Bench(BenchArgs),
    /// Show the top-weighted tokens of an embedding and, with --query, the
    /// per-token contributions to a retrieval score.
    Explain(ExplainArgs),
    /// Verify analytic gradients against central finite differences on
    /// random configurations.
    Gradcheck(GradcheckArgs),
    /// Generate a seeded synthetic topic dataset (vocab, corpus, queries,
    /// qrels, training pairs).
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSONL training pairs: {"query", "positive", optional "negative"}.
    #[arg(long)]
    pairs: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Hidden width (desk-scale default; the reference setting is 768).
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Peak learning rate (desk-scale default; the reference setting is 2e-5).
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Batch size (desk-scale default; the reference setting is 256).
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Query-side activation budget during training [default: d].
    #[arg(long)]
    k_query: Option<usize>,
    #[arg(long, default_value_t = 1)]
    warmup_epochs: usize,
    #[arg(long, value_enum, default_value_t = DecayArg::Linear)]
    decay: DecayArg,
    /// Drop the nonparametric (bag-of-words) loss entry.
    #[arg(long, action = ArgAction::SetTrue)]
    no_bow_entry: bool,
    /// Enable the contrastive mask (off by default for text training).
    #[arg(long, action = ArgAction::SetTrue)]
    cts: bool,
    #[arg(long, value_enum, default_value_t = ActivationArg::Elu1p)]
    activation: ActivationArg,
    /// Use a separate projection matrix instead of tying it to the
    /// embedding.
    #[arg(long, action = ArgAction::SetTrue)]
    untied: bool,
    /// L2-normalize representations before scoring.
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EmbedArgs {
    /// JSONL corpus: {"id", "text"} records.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Parametric)]
    mode: ModeArg,
    /// Activation budget [default: the checkpoint's d].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    /// Write the embedding dump here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print corpus-level token statistics instead of the dump.
    #[arg(long, action = ArgAction::SetTrue)]
    stats: bool,
    /// How many top tokens the statistics report lists.
    #[arg(short, long, default_value_t = 20)]
    m: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target-side activation budget [default: the checkpoint's d].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Parametric)]
    mode: ModeArg,
    /// Required in parametric mode.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query-side activation budget [default: the checkpoint's d].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// Worker threads for query processing; results are byte-identical to
    /// --threads 1.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Run tag written in the output file.
    #[arg(long, default_value = "vdr")]
    tag: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated list, e.g. ndcg@10,recall@1,mrr@10.
    #[arg(long, default_value = "ndcg@10,recall@1,recall@5,recall@10,mrr@10")]
    metrics: String,
    /// Second run file: prints a paired two-sided t-test per metric.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Parametric)]
    mode: ModeArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query-side activation budget [default: the checkpoint's d].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// Write a JSON Lines per-query report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Qrels for the sweep's NDCG@10 column.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Comma-separated activation budgets: measure once per k and print a
    /// TSV table (requires --checkpoint and --qrels).
    #[arg(long)]
    sweep_k: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExplainArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Without a checkpoint the embedding and query are nonparametric.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Text to embed and explain.
    #[arg(long, conflicts_with = "doc_id")]
    text: Option<String>,
    /// Explain a document stored in --index instead of raw text.
    #[arg(long, requires = "index")]
    doc_id: Option<String>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Also score this query against the embedding and print per-token
    /// contributions.
    #[arg(long)]
    query: Option<String>,
    /// How many tokens to list.
    #[arg(short, long, default_value_t = 10)]
    m: usize,
    /// Query-side activation budget [default: the checkpoint's d].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, action = ArgAction::SetTrue)]
    normalize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 400)]
    docs: usize,
    #[arg(long, default_value_t = 80)]
    queries: usize,
    #[arg(long, default_value_t = 20)]
    doc_len: usize,
    #[arg(long, default_value_t = 8)]
    query_len: usize,
    /// Probability that a token is drawn from the shared noise pool.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match merge_config(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let cli = Cli::parse_from(&argv);
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// When the named subcommand carries `--config FILE`, splice the file's
/// settings in front of the user's flags (validated against the
/// subcommand's long option names).
fn merge_config(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&argv[1]) else {
        return Ok(argv);
    };
    let mut known = HashSet::new();
    let mut bools = HashSet::new();
    for arg in sub.get_arguments() {
        if let Some(long) = arg.get_long() {
            known.insert(long.to_string());
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                bools.insert(long.to_string());
            }
        }
    }
    config::inject_config_args(&argv, &known, &bools)
}
