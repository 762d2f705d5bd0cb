//! `mtplan`: every pipeline stage as a subcommand.
//!
//! Relative output paths resolve against `$MTPLAN_OUTPUT_ROOT` when it is
//! set. Run directories written by `train`, `run` and `sweep` hold
//! `config.json` (with the crate version and derived seeds),
//! `checkpoint.json`, `history.csv` and, after evaluation, `report.json`.
//!
//! Failures print one JSON object on stderr and exit with:
//! 2 usage, 3 missing file or I/O, 4 schema or JSON, 5 divergence,
//! 6 invalid argument or other library error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mtplan", version, about = "Multi-token prediction path-planning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random DAG with edges i -> k (i < k) kept with probability p.
    GenGraph {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        edge_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "graph.json")]
        out: PathBuf,
    },
    /// Train/test path files plus meta.json with degree labels.
    GenDataset {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 20)]
        paths_per_pair: usize,
        #[arg(long, default_value_t = 0.1)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the graph recorded in the dataset's meta.json.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Export weight and attention analyses as CSV/JSON.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Simplified transformer experiments and checks.
    Simplified {
        #[command(subcommand)]
        what: SimplifiedCommand,
    },
    /// Blocksworld state graphs and datasets.
    Blocksworld {
        #[command(subcommand)]
        what: BlocksworldCommand,
    },
    /// Full pipeline (graph, dataset, train, eval) from an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Print the default experiment config as JSON.
    DefaultConfig,
    /// Architectures x graphs x replicates, aggregated into one CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// 1tok, {K}tok-lin, {K}tok-nti-lin, {K}tok-nti-tf{L}, {K}tok-tf{L}, {K}tok-indep.
    #[arg(long, default_value = "1tok")]
    arch: String,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct ShapeArgs {
    #[arg(long, default_value_t = 120)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
}

#[derive(Args, Clone, Copy)]
struct TrainFlags {
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Args, Clone, Copy)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    decode: DecodeMode,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectionArg {
    Raw,
    Composed,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Node-indexed transfer matrix and its adjacency statistics.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long, value_enum, default_value = "raw")]
        projection: ProjectionArg,
        #[arg(long, default_value = "analysis")]
        out_root: PathBuf,
        #[arg(long, default_value = "run")]
        run_id: String,
    },
    /// Mean attention maps over the test sequences.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_root: PathBuf,
        #[arg(long, default_value = "run")]
        run_id: String,
    },
}

#[derive(Subcommand)]
enum SimplifiedCommand {
    /// Train on a random graph and export W^M, W^V, W^T with their masks.
    Train {
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 0.2)]
        edge_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Learn W^T from zero instead of fixing it to the true adjacency.
        #[arg(long)]
        learn_transfer: bool,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Train on the next-token loss only.
        #[arg(long)]
        one_token: bool,
        #[arg(long, default_value = "analysis")]
        out_root: PathBuf,
        #[arg(long, default_value = "simplified")]
        run_id: String,
    },
    /// Check the gradient sign properties on random instances.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        max_vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BlocksworldCommand {
    /// states.json and graph.json for a block count.
    Enumerate {
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value = "blocksworld")]
        out: PathBuf,
    },
    /// Train/test path files over the state graph.
    Dataset {
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 500)]
        n_per_length: usize,
        #[arg(long, default_value_t = 5000)]
        test_paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "blocksworld")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config JSON; replaces every other flag when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1tok,2tok-nti-tf1")]
    archs: Vec<String>,
    #[arg(long, default_value_t = 2)]
    graphs: usize,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long, default_value_t = 100)]
    nodes: usize,
    #[arg(long, default_value_t = 0.1)]
    edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long, default_value = "sweep")]
    run_id: String,
    /// Directory for the CSV and per-cell run directories.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = commands::classify(&e);
            let body = serde_json::json!({
                "error": kind,
                "message": format!("{e:#}"),
                "exit_code": code,
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
