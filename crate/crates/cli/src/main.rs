//! `panoptic`: target encoding, fusion, evaluation, benchmarking and
//! self-checks over tensor files.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panoptic_core::{ScoreMode, StuffSegments};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "panoptic", version, about = "Center-regression panoptic segmentation tools")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Dataset spec JSON (default: built-in Cityscapes table).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode training targets from a groundtruth panoptic map.
    Targets(TargetsArgs),
    /// Fuse semantic, center and offset predictions into a panoptic map.
    Fuse(FuseArgs),
    /// Score panoptic predictions against groundtruth.
    Eval(EvalArgs),
    /// Time the fusion stages on synthetic inputs.
    Bench(BenchArgs),
    /// Check the implementation against brute-force references.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct TargetsArgs {
    /// Groundtruth panoptic map (u16 or u32 tensor).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    /// Gaussian cutoff in multiples of sigma.
    #[arg(long, default_value_t = 3.0)]
    truncation: f64,
    #[arg(long, default_value_t = 4096)]
    small_instance_area: u64,
    #[arg(long, default_value_t = 3.0)]
    small_instance_weight: f64,
    /// Put heatmap peaks on the nearest pixel to each mass center.
    #[arg(long)]
    round_centers: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StuffSegmentsArg {
    Category,
    Component,
}

impl From<StuffSegmentsArg> for StuffSegments {
    fn from(s: StuffSegmentsArg) -> Self {
        match s {
            StuffSegmentsArg::Category => StuffSegments::Category,
            StuffSegmentsArg::Component => StuffSegments::Component,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoreModeArg {
    Objectness,
    Class,
    Product,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(s: ScoreModeArg) -> Self {
        match s {
            ScoreModeArg::Objectness => ScoreMode::Objectness,
            ScoreModeArg::Class => ScoreMode::Class,
            ScoreModeArg::Product => ScoreMode::Product,
        }
    }
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Label map (H, W) or class probabilities (H, W, C).
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    heatmap: PathBuf,
    /// Offsets as an (H, W, 2) f32 tensor of [d_row, d_col].
    #[arg(long)]
    offsets: PathBuf,
    /// Output panoptic map.
    #[arg(long)]
    out: PathBuf,
    /// Also write the instance list as a JSON array.
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    nms_kernel: usize,
    #[arg(long, default_value_t = 0.1)]
    center_threshold: f32,
    #[arg(long, default_value_t = 200)]
    top_k: usize,
    /// Overrides the spec's stuff area threshold.
    #[arg(long)]
    stuff_area_threshold: Option<u64>,
    #[arg(long, value_enum, default_value_t = StuffSegmentsArg::Category)]
    stuff_segments: StuffSegmentsArg,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Product)]
    score_mode: ScoreModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Pq,
    Miou,
    Ap,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted panoptic maps.
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    /// Groundtruth panoptic maps, in the same order.
    #[arg(long, num_args = 1.., required = true)]
    gt: Vec<PathBuf>,
    /// Instance lists written by `fuse`, for AP scores (default score 1).
    #[arg(long, num_args = 1..)]
    pred_instances: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalMode::All)]
    mode: EvalMode,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1025)]
    height: usize,
    #[arg(long, default_value_t = 2049)]
    width: usize,
    #[arg(long, default_value_t = 200)]
    centers: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit with status 3 unless the full pipeline takes < 1 s and the merge
    /// stage < 100 ms.
    #[arg(long)]
    assert_budget: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    NmsOffByOne,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random cases per brute-force comparison.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panoptic: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>, CliError> {
    match threads {
        None => Ok(None),
        Some(0) => Err(CliError::Validation("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| CliError::Io(format!("cannot start thread pool: {e}"))),
    }
}
