//! `superbloom` — end-to-end pipeline for hash-compressed vocabulary models:
//! build hash schemes, synthesize or prepare corpora, train, evaluate, run
//! top-k inference, and benchmark beam search against exhaustive scoring.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use superbloom_core::Error;

#[derive(Parser)]
#[command(name = "superbloom", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a hash scheme (random by default, coherent with embeddings).
    BuildHash {
        /// Number of ordinary entities; exclusive with --vocab-file.
        #[arg(long)]
        vocab_size: Option<u32>,
        /// Text file with one entity name per line; the line count sets the
        /// vocabulary size.
        #[arg(long)]
        vocab_file: Option<PathBuf>,
        /// Number of hash functions.
        #[arg(long, short = 'm', default_value_t = 2)]
        m: usize,
        /// Collisions per bucket.
        #[arg(long, default_value_t = 20)]
        alpha: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated special token names.
        #[arg(long, default_value = "MASK,PAD")]
        specials: String,
        /// Embedding matrix (one whitespace-separated row per entity)
        /// enabling coherent construction.
        #[arg(long)]
        coherent_embeddings: Option<PathBuf>,
        /// How many of the m functions are coherent (the last ones); defaults
        /// to all of them when embeddings are given.
        #[arg(long)]
        coherent_count: Option<usize>,
        /// Per-entity frequencies (one per line) ordering coherent bucket
        /// creation; defaults to uniform.
        #[arg(long)]
        frequencies: Option<PathBuf>,
        /// Existing scheme whose functions additionally constrain every
        /// coherent bucket.
        #[arg(long)]
        constraint_scheme: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic clustered corpus with a Zipf frequency profile.
    SynthCorpus {
        #[arg(long, default_value_t = 10_000)]
        entities: u32,
        #[arg(long, default_value_t = 2_000)]
        pages: usize,
        #[arg(long, default_value_t = 50)]
        clusters: u32,
        #[arg(long, default_value_t = 1.0)]
        zipf_s: f64,
        #[arg(long, default_value_t = 20)]
        min_len: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        /// Emit fixed within-cluster partner pairs together, so a held-out
        /// entity is identifiable from the partner left in context.
        #[arg(long, default_value_t = false)]
        paired: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize masked examples into a reusable binary cache.
    PrepareData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        /// train: 15% masking with perturbation on the train split;
        /// eval: one held-out entity per example on the test split.
        #[arg(long, default_value = "train")]
        mode: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        n_max: usize,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; artifacts go to a fingerprint-named run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config key: --set train.total_steps=500
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        /// Run-directory root; defaults to $SUPERBLOOM_RUN_ROOT or ./runs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: recall at k plus frequency-decile recall.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        /// Comma-separated recall cutoffs.
        #[arg(long, default_value = "1,10,20")]
        k: String,
        #[arg(long, default_value_t = 20)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 500)]
        examples: usize,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as key=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the vocabulary for masked queries read from a file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scheme: PathBuf,
        /// One query per line: entity ids with a single `?` (or `[MASK]`)
        /// marking the held-out slot.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value = "log_sum")]
        score_fn: String,
        /// Sidecar vocabulary (one entity name per line, line number = id)
        /// used to pretty-print predictions.
        #[arg(long)]
        names: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare beam search against exhaustive scoring.
    Bench {
        #[arg(long)]
        scheme: PathBuf,
        /// Score model predictions from this checkpoint (needs --corpus).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Use synthetic random predictions instead of a checkpoint.
        #[arg(long, default_value_t = false)]
        random_predictions: bool,
        #[arg(long, default_value_t = 20)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        /// Sharpness of the synthetic distributions.
        #[arg(long, default_value_t = 6.0)]
        sharpness: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit codes by error class: 2 config, 3 I/O or artifact format, 4 numeric
/// divergence, 5 infeasible scheme, 1 anything else.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Parse { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::InfeasibleScheme(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
