use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "pklbench",
    version,
    about = "Planner-centric detection metrics on synthetic driving scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    Gen(GenArgs),
    /// Train the planner.
    Train(TrainArgs),
    /// Top-k and L2 quality of a planner on ego trajectories.
    EvalPlanner(EvalPlannerArgs),
    /// Per-chunk and aggregate PKL of a submission.
    EvalPkl(EvalPklArgs),
    /// mAP / NDS of a submission.
    EvalNds(EvalNdsArgs),
    /// PKL and NDS of perturbed perfect detections over noise levels.
    NoiseSweep(NoiseSweepArgs),
    /// PKL and NDS after removing agents ranked by distance or speed.
    PercentileCurve(PercentileArgs),
    /// Chunks ordered by PKL, with their local NDS.
    RankChunks(RankArgs),
    /// PKL cost of deleting each object in one chunk.
    FnImportance(ChunkArgs),
    /// PKL of a phantom box placed over the grid in one chunk.
    FpHeatmap(HeatmapArgs),
    /// Run the HTTP evaluation server.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::EvalPlanner(_) => "eval-planner",
            Command::EvalPkl(_) => "eval-pkl",
            Command::EvalNds(_) => "eval-nds",
            Command::NoiseSweep(_) => "noise-sweep",
            Command::PercentileCurve(_) => "percentile-curve",
            Command::RankChunks(_) => "rank-chunks",
            Command::FnImportance(_) => "fn-importance",
            Command::FpHeatmap(_) => "fp-heatmap",
            Command::Serve(_) => "serve",
        }
    }

    pub fn jobs(&self) -> Option<usize> {
        match self {
            Command::Gen(_) | Command::EvalNds(_) => None,
            Command::Train(a) => a.jobs,
            Command::EvalPlanner(a) => a.jobs,
            Command::EvalPkl(a) => a.jobs,
            Command::NoiseSweep(a) => a.jobs,
            Command::PercentileCurve(a) => a.jobs,
            Command::RankChunks(a) => a.jobs,
            Command::FnImportance(a) => a.jobs,
            Command::FpHeatmap(a) => a.chunk.jobs,
            Command::Serve(a) => a.jobs,
        }
    }
}

/// Half-open range of scene indices in scene-id order, `A..B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneRange {
    pub start: usize,
    pub end: usize,
}

impl FromStr for SceneRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("expected START..END, got `{s}`"))?;
        let start = if a.is_empty() {
            0
        } else {
            a.parse().map_err(|e| format!("{e}"))?
        };
        let end = if b.is_empty() {
            usize::MAX
        } else {
            b.parse().map_err(|e| format!("{e}"))?
        };
        if start > end {
            return Err(format!("empty range `{s}`"));
        }
        Ok(Self { start, end })
    }
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    /// Directory of scene files.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Restrict to scenes START..END in scene-id order.
    #[arg(long)]
    pub range: Option<SceneRange>,
}

#[derive(Debug, Clone, Args)]
pub struct DetArgs {
    /// Detection file or directory, or `perfect` for ground truth.
    #[arg(long)]
    pub dets: String,
    /// Drop detections scoring below this.
    #[arg(long, default_value_t = 0.0)]
    pub score_thresh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Mixed,
    StraightRoad,
    Intersection,
    ParkingLot,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub n_scenes: usize,
    #[arg(long, value_enum, default_value_t = LayoutArg::Mixed)]
    pub layout: LayoutArg,
    /// Scene length in seconds.
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Pooled input and half widths, 2000 steps.
    Desk,
    /// Full-resolution encoder, 10k steps.
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Planner config JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalPlannerArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalPklArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[command(flatten)]
    pub dets: DetArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalNdsArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[command(flatten)]
    pub dets: DetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseSweepArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// translation, orientation, size, drop or false_positive.
    #[arg(long)]
    pub kind: String,
    /// Comma-separated increasing levels.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankBy {
    Distance,
    Speed,
}

#[derive(Debug, Clone, Args)]
pub struct PercentileArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub by: RankBy,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,10,20,30,40,50,60,70,80,90,100")]
    pub percentiles: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub n_remove: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[command(flatten)]
    pub dets: DetArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ChunkArgs {
    #[command(flatten)]
    pub scenes: SceneArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scene_id: String,
    /// Chunk time (s); must be a keyframe with full history and horizon.
    #[arg(long)]
    pub t0: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub chunk: ChunkArgs,
    /// Lattice spacing (m); defaults to 1/32 of the grid extent.
    #[arg(long)]
    pub stride: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub box_length: f64,
    #[arg(long, default_value_t = 1.0)]
    pub box_width: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Scene directory to host; repeatable. Hosted under its directory name.
    #[arg(long, required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Where submissions and results are stored.
    #[arg(long, alias = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = pklbench_server::DEFAULT_MAX_BODY_MB)]
    pub max_body_mb: usize,
    #[arg(long, default_value_t = pklbench_server::DEFAULT_MAX_CONCURRENT)]
    pub max_concurrent: usize,
    #[arg(long)]
    pub jobs: Option<usize>,
}
