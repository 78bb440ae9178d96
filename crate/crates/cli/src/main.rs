mod commands;
mod values;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mia_core::Method;

/// Membership inference toolkit: Con-ReCall and baselines over trace, HTTP
/// or synthetic language models.
#[derive(Parser, Debug)]
#[command(name = "mia", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-token log-probabilities of texts, written as trace records
    Score(ScoreArgs),
    /// Score a dataset with every requested method and report AUC / TPR@FPR
    Eval(RunArgs),
    /// Repeat an evaluation over a grid of gamma, k or shots values
    Sweep(SweepArgs),
    /// Signed Wasserstein shift of log-likelihoods under member / non-member prefixes
    Shift(ShiftArgs),
    /// Perturb dataset texts (deletion, synonyms, paraphrase)
    Transform(TransformArgs),
    /// Complete truncated events with the target model to stand in for members
    ApproxMembers(ApproxArgs),
    /// Write the built-in synthetic benchmark to a directory
    SynthBench(SynthArgs),
    /// Min-max normalized scores of a finished run, one row per sample and method
    ExportDistributions(ExportArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Provider URI (synth:<seed>, trace:<path>, http://host:port) (required)
    #[arg(long)]
    provider: String,
    /// JSONL file with {"id", "text"} lines [default: none]
    #[arg(long, conflicts_with = "text", required_unless_present = "text")]
    input: Option<PathBuf>,
    /// A single text to score [default: none]
    #[arg(long)]
    text: Option<String>,
    /// Prefix the texts are conditioned on [default: none]
    #[arg(long)]
    context: Option<String>,
    /// Also request per-position distribution statistics [default: off]
    #[arg(long)]
    stats: bool,
    /// Output file [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransformKind {
    #[value(name = "random_deletion")]
    RandomDeletion,
    #[value(name = "synonym_substitution")]
    SynonymSubstitution,
    #[value(name = "paraphrase")]
    Paraphrase,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset JSONL with {"id", "text", "label"} lines (required)
    #[arg(long)]
    dataset: PathBuf,
    /// Target provider URI (required)
    #[arg(long)]
    provider: String,
    /// Reference provider URI, needed by the ref method [default: none]
    #[arg(long)]
    ref_provider: Option<String>,
    /// Comma-separated methods: loss, ref, zlib, neighbor, mink, minkpp, recall, conrecall
    #[arg(long, value_delimiter = ',', default_value = "loss,recall,conrecall")]
    methods: Vec<Method>,
    /// Shots per prefix
    #[arg(long, default_value_t = 7)]
    shots: usize,
    /// Member texts reserved for prefixes [default: shots, or 0 with --member-shots]
    #[arg(long)]
    member_pool: Option<usize>,
    /// Non-member texts reserved for prefixes [default: shots]
    #[arg(long)]
    nonmember_pool: Option<usize>,
    /// Events-format JSONL of member shots, e.g. from approx-members [default: none]
    #[arg(long)]
    member_shots: Option<PathBuf>,
    /// Con-ReCall gamma grid: list or start:stop:step
    #[arg(long, default_value = "0.1:1.0:0.1")]
    gamma: String,
    /// Min-K% and Min-K%++ k grid in percent: list or start:stop:step
    #[arg(long, default_value = "10:100:10")]
    k: String,
    /// FPR levels for TPR@FPR
    #[arg(long, default_value = "0.05")]
    fpr: String,
    /// Seed for the prefix pool and neighbors
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbors per text for the neighbor method
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    /// Synonym substitution rate used to build neighbors
    #[arg(long, default_value_t = 0.1)]
    neighbor_rate: f64,
    /// Synonym lexicon TSV (word, tab, synonyms) [default: bundled English lexicon]
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Perturbation applied to evaluation texts [default: none]
    #[arg(long, value_enum)]
    transform: Option<TransformKind>,
    /// Rate for random_deletion and synonym_substitution [default: none]
    #[arg(long)]
    transform_rate: Option<f64>,
    /// Seed for the transform
    #[arg(long, default_value_t = 0)]
    transform_seed: u64,
    /// Paraphrase pairs JSONL {"id", "text"} for the paraphrase transform [default: none]
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Run directory for config.json, scores.jsonl, report.json [default: none, report to stdout]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log-likelihood cache directory [default: <out>/cache]
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    Gamma,
    K,
    Shots,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Swept parameter (required)
    #[arg(long, value_enum)]
    param: SweepKind,
    /// Values: list or start:stop:step (required)
    #[arg(long)]
    values: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Statistic {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct ShiftArgs {
    /// Dataset JSONL (required)
    #[arg(long)]
    dataset: PathBuf,
    /// Provider URI (required)
    #[arg(long)]
    provider: String,
    /// Shot counts: list or start:stop:step
    #[arg(long, default_value = "0:7:1")]
    shots: String,
    /// Histogram cells for the Wasserstein distance
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Per-text log-likelihood statistic
    #[arg(long, value_enum, default_value_t = Statistic::Mean)]
    statistic: Statistic,
    /// Seed for the prefix pool
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Log-likelihood cache directory [default: none]
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Profile CSV (shots,pairing,signed_wasserstein) [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransformArgs {
    /// Dataset JSONL (required)
    #[arg(long)]
    dataset: PathBuf,
    /// Operation (required)
    #[arg(long, value_enum)]
    op: TransformKind,
    /// Fraction of words affected, for random_deletion and synonym_substitution [default: none]
    #[arg(long)]
    rate: Option<f64>,
    /// Seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synonym lexicon TSV [default: bundled English lexicon]
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Paraphrase pairs JSONL [default: none]
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Transformed dataset JSONL [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample transform report JSONL [default: none]
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyKind {
    Greedy,
    Sample,
}

#[derive(Args, Debug)]
struct ApproxArgs {
    /// Events JSONL with {"text"} lines (required)
    #[arg(long)]
    events: PathBuf,
    /// Provider URI with generation support (required)
    #[arg(long)]
    provider: String,
    /// Fraction of each event's words kept before completion: one value or one per event
    #[arg(long, default_value = "0.5")]
    cut: String,
    /// Tokens generated per event
    #[arg(long, default_value_t = 32)]
    target_len: usize,
    /// Decoding strategy
    #[arg(long, value_enum, default_value_t = StrategyKind::Greedy)]
    strategy: StrategyKind,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL in events format [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for dataset.jsonl, events.jsonl and lexicon.tsv (required)
    #[arg(long)]
    out: PathBuf,
    /// Benchmark seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary size
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    /// Number of topics; non-members spread over topics 1..
    #[arg(long, default_value_t = 3)]
    topics: usize,
    /// Target prior mass on the member topic
    #[arg(long, default_value_t = 0.8)]
    prior: f64,
    /// Uniform share of each topic's word distribution
    #[arg(long, default_value_t = 0.85)]
    background: f64,
    /// Dirichlet concentration of the topic-specific part
    #[arg(long, default_value_t = 0.3)]
    concentration: f64,
    /// Share of words reshuffled between consecutive non-member topics
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    /// Probability smoothing
    #[arg(long, default_value_t = 1e-6)]
    smoothing: f64,
    /// Member documents
    #[arg(long, default_value_t = 300)]
    members: usize,
    /// Non-member documents
    #[arg(long, default_value_t = 300)]
    nonmembers: usize,
    /// Words per document
    #[arg(long, default_value_t = 32)]
    doc_len: usize,
    /// Member-topic event texts kept out of the dataset
    #[arg(long, default_value_t = 7)]
    events: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory written by eval --out (required)
    #[arg(long)]
    run: PathBuf,
    /// Restrict to these methods [default: every method in the report]
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// CSV (sample_id,label,method,normalized_score) [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let provider_failure = err
        .chain()
        .filter_map(|e| e.downcast_ref::<mia_core::Error>())
        .any(mia_core::Error::is_provider_failure);
    if provider_failure {
        2
    } else {
        1
    }
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    use std::io::ErrorKind::BrokenPipe;
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == BrokenPipe)
            || e.downcast_ref::<serde_json::Error>()
                .is_some_and(|j| j.io_error_kind() == Some(BrokenPipe))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Shift(a) => commands::shift(a),
        Command::Transform(a) => commands::transform(a),
        Command::ApproxMembers(a) => commands::approx_members(a),
        Command::SynthBench(a) => commands::synth_bench(a),
        Command::ExportDistributions(a) => commands::export_distributions(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // a closed pipe (e.g. `| head`) is not a failure
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
