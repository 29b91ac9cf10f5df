//! `partatlas`: synthetic data, anchor and part training, evaluation,
//! matching and atlas export from the command line.

mod commands;
mod config;
mod error;
mod repro;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "partatlas", version, about = "Weakly supervised part learning with anchor geometry")]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file. Commands that only report print to stdout without it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Car parts with outliers and scale jitter.
    Standard,
    /// Face parts with a nose nested inside a nose tip extent.
    Nested,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub profile: Preset,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Generate this many congruent scene pairs instead of query images,
    /// and write the pairs next to the manifest.
    #[arg(long)]
    pub congruent: Option<usize>,
}

/// Anchor detections, either from a file or computed from a bank.
#[derive(Debug, Args)]
pub struct AnchorSource {
    /// Anchor detections written by `detect-anchors`.
    #[arg(long, conflicts_with = "bank")]
    pub detections: Option<PathBuf>,
    /// Anchor bank; detections are computed on the fly.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPartArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub concept: String,
    /// Embedding variant: B, B+C, B+G or B+C+G.
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub anchors: AnchorSource,
    /// Image id of the annotated exemplar.
    #[arg(long, requires = "exemplar_box")]
    pub exemplar_image: Option<String>,
    /// Exemplar box as `x1,y1,x2,y2`.
    #[arg(long, requires = "exemplar_image")]
    pub exemplar_box: Option<String>,
    #[arg(long, default_value_t = 5.0)]
    pub beta: f64,
    /// Pick lambda by CorLoc over the training positives (needs ground truth).
    #[arg(long)]
    pub lambda_search: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub anchors: AnchorSource,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 0.3)]
    pub nms: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Part model; repeat for several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[command(flatten)]
    pub anchors: AnchorSource,
    #[arg(long, default_value_t = partatlas_core::eval::DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub anchors: AnchorSource,
    /// anchor-ag, anchor-g or a.
    #[arg(long)]
    pub variant: Option<String>,
    /// Pairs file written by `synth --congruent`; runs the benchmark.
    #[arg(long, conflicts_with_all = ["source", "target"])]
    pub pairs: Option<PathBuf>,
    #[arg(long, requires_all = ["target", "region"])]
    pub source: Option<String>,
    /// Source region as `x1,y1,x2,y2`.
    #[arg(long = "box")]
    pub region: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct AtlasArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub top_edges: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted parts.
    Synth(SynthArgs),
    /// Train an anchor bank on a dataset's weak labels.
    TrainAnchors {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an anchor bank on every image.
    DetectAnchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        top_l: Option<usize>,
        #[arg(long)]
        nms: Option<f64>,
    },
    /// Train a part model with multiple-instance learning.
    TrainPart(TrainPartArgs),
    /// Ranked part detections on every image.
    Detect(DetectArgs),
    /// AP and CorLoc of part models against ground truth.
    Eval(EvalArgs),
    /// Cross-image region matching.
    Match(MatchArgs),
    /// Spatially pooled anchor scores per image.
    GridEncode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Export the part graph consumed by the viewer.
    Atlas(AtlasArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
