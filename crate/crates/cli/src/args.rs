//! Flag definitions and the optional TOML defaults file.
//!
//! Flags are the interface; a `--config` file may pre-set the *numeric*
//! knobs (and the seed), and an explicit flag always wins over the file.
//! Paths are never taken from the file — each command states its inputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nail_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "nail", version, about = "Sparse lexical retrieval pipeline")]
pub struct Cli {
    /// Seed for all randomness (parameter init, batch order, crops).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file providing defaults for numeric flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a corpus and persist the impact-ordered index.
    BuildIndex(BuildIndexArgs),
    /// Run queries against a corpus or index, writing a TREC run file.
    Retrieve(RetrieveArgs),
    /// Rescore an existing run's candidates with stored document vectors.
    Rerank(RerankArgs),
    /// Train the document scorer and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Score a run file against relevance judgments.
    Evaluate(EvaluateArgs),
    /// Measure recall@100 as a function of the per-document token budget.
    Sweep(SweepArgs),
    /// Print the multiply-accumulate cost of scoring candidates.
    Flops(FlopsArgs),
    /// Print each document's highest-scoring vocabulary terms.
    TopTerms(TopTermsArgs),
}

/// Where document score vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scorer {
    /// Per-term BM25 contributions computed from corpus statistics.
    Bm25,
    /// A trained checkpoint scoring every vocabulary term per document.
    Model,
    /// Precomputed sparse vectors from an NDJSON file.
    VectorsFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrieveMode {
    /// Term-frequency BM25 over the corpus.
    Bm25,
    /// Exhaustive traversal of a persisted impact index.
    NailExh,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long, value_name = "NDJSON")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_enum)]
    pub scorer: Scorer,
    /// Checkpoint path; required when --scorer=model.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// NDJSON vectors path; required when --scorer=vectors-file.
    #[arg(long, value_name = "NDJSON")]
    pub vectors_file: Option<PathBuf>,
    /// Keep only each document's top-k terms (default: all non-zeros).
    #[arg(long)]
    pub sparsify_k: Option<usize>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Worker threads for scoring (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, value_enum)]
    pub mode: RetrieveMode,
    #[arg(long, value_name = "TSV")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Impact index; required when --mode=nail-exh.
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Corpus to index on the fly; required when --mode=bm25.
    #[arg(long, value_name = "NDJSON")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Documents returned per query.
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Candidate run file; its per-query candidate sets are preserved.
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    #[arg(long, value_name = "TSV")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Take document vectors from a persisted impact index.
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// Take document vectors from an NDJSON vectors file.
    #[arg(long, value_name = "NDJSON")]
    pub vectors_file: Option<PathBuf>,
    /// Candidates consumed per query (by rank).
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// "pretrain" (corpus pseudo-queries) or "finetune" (mined triples).
    #[arg(long)]
    pub stage: String,
    /// Document corpus; required when --stage=pretrain.
    #[arg(long, value_name = "NDJSON")]
    pub corpus: Option<PathBuf>,
    /// Training triples; required when --stage=finetune.
    #[arg(long, value_name = "NDJSON")]
    pub triples: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Checkpoint destination.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Loss-curve CSV destination (default: `<output>.loss.csv`).
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Hard negatives sampled per example.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Passages per batch (examples × (1 + negatives)).
    #[arg(long)]
    pub total_passages: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub run: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    /// Comma-separated metric list, e.g. "ndcg@10,recall@100,mrr@10".
    #[arg(long, default_value = "ndcg@10,recall@100,mrr@10")]
    pub metrics: String,
    /// Optional CSV destination; the table always prints to stdout.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "NDJSON")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_enum)]
    pub scorer: Scorer,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "NDJSON")]
    pub vectors_file: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long, value_name = "TSV")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    /// Comma-separated ascending token budgets, e.g. "4,16,64".
    #[arg(long)]
    pub ks: String,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub query_len: u64,
    #[arg(long)]
    pub num_docs: u64,
}

#[derive(Debug, Args)]
pub struct TopTermsArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    #[arg(long, value_name = "NDJSON")]
    pub corpus: PathBuf,
    /// Restrict output to one document.
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Terms printed per document.
    #[arg(long)]
    pub terms: Option<usize>,
}

/// Numeric defaults a `--config` file may provide. Unknown keys are
/// rejected so a typo cannot silently fall back to built-in defaults.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDefaults {
    pub seed: Option<u64>,
    pub top_n: Option<usize>,
    pub sparsify_k: Option<usize>,
    pub k1: Option<f64>,
    pub b: Option<f64>,
    pub hidden: Option<usize>,
    pub positions: Option<usize>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub negatives: Option<usize>,
    pub total_passages: Option<usize>,
    pub eval_every: Option<usize>,
    pub holdout_fraction: Option<f64>,
    pub threads: Option<usize>,
    pub terms: Option<usize>,
}

pub fn load_defaults(path: Option<&Path>) -> Result<FileDefaults> {
    let Some(path) = path else {
        return Ok(FileDefaults::default());
    };
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&raw)
        .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
}

/// Flag value if given, else the config-file value, else the built-in.
pub fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
