mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bindkit::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "bindkit", version, about = "Bind pre-embedded modalities into one space")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or query similarity indices.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Curate caption/candidate pairs.
    #[command(subcommand)]
    Pair(PairCmd),
    /// Run or export human verification projects.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Train projectors.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Evaluate embeddings.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Synthetic concept worlds.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Top-k neighbours of items across stores.
    Query(QueryArgs),
}

#[derive(Debug, Args)]
pub struct HnswArgs {
    /// Use an HNSW graph instead of exact search.
    #[arg(long)]
    pub hnsw: bool,
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = 64)]
    pub ef_search: usize,
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    /// Build an HNSW graph over a store and save it.
    Build {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hnsw: HnswArgs,
    },
    /// Search a store with every row of another store.
    Search {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Saved HNSW graph; exact search when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum PairCmd {
    /// Top-1 quintuple per caption.
    Quintuples {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hnsw: HnswArgs,
    },
    /// Top-k pool candidates per caption.
    Candidates {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hnsw: HnswArgs,
    },
    /// Greedy capped matching, then per-caption candidate groups.
    Match {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        m_cap: usize,
        #[arg(long, default_value_t = 3)]
        per_caption: usize,
        /// Candidate groups (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Accepted pairs (JSON lines).
        #[arg(long)]
        pairs_out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Split2,
    Consensus,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportKind {
    Split2,
    Consensus,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCmd {
    /// Create a project from candidate groups.
    Create {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Split2)]
        mode: ModeArg,
        #[arg(long)]
        groups: PathBuf,
        /// Caption store, for caption texts.
        #[arg(long)]
        captions: PathBuf,
        /// Candidate pool, for the modality and item uris.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        required_annotators: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Export Split-2 labels or consensus pairs as JSON lines.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        project: String,
        #[arg(long, value_enum, default_value_t = ExportKind::Split2)]
        kind: ExportKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        required: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Train all stages from scratch.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Continue the remaining stages from a checkpoint.
    Resume {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Recall@k of queries against a gallery.
    Retrieval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// JSON lines {query, target}; identical ids are relevant when absent.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Projects audio/points stores first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Keep only items tagged for evaluation.
        #[arg(long)]
        eval_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k accuracy against template-averaged class representatives.
    Zeroshot {
        #[arg(long)]
        items: PathBuf,
        /// JSON lines {id, class}.
        #[arg(long)]
        item_classes: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        /// JSON lines {id, class}.
        #[arg(long)]
        template_classes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-label mAP from a JSON file {scores, labels}.
    Map {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bidirectional audio/points class-mean classification.
    Eshot {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        audio_classes: PathBuf,
        #[arg(long)]
        points_classes: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Keep only items tagged for evaluation.
        #[arg(long)]
        eval_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Generate and save a concept world.
    World {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        concepts: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4000)]
        items: usize,
        #[arg(long, default_value_t = 1000)]
        heldout: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
    },
    /// Corrupt quintuple audio/points slots and label every pair.
    Corrupt {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        quintuples: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        partial: f64,
        #[arg(long)]
        out_quintuples: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Only this item of the source store.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub against: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn init_logging(level: LogLevel) {
    let level = match level {
        LogLevel::Error => tracing::Level::ERROR,
        LogLevel::Warn => tracing::Level::WARN,
        LogLevel::Info => tracing::Level::INFO,
        LogLevel::Debug => tracing::Level::DEBUG,
        LogLevel::Trace => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.log_level);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("usage: bindkit [--seed N] [--threads N] [--log-level L] [--json] <command> ...");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
