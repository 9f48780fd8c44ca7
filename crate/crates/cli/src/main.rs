//! `smoothbench`: dataset generation and validation, vote statistics,
//! leaderboards, training, inference, timing, demo pipelines and the
//! annotation service.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smoothbench::dataset::Split;
use smoothbench::metrics::PoolingMode;

#[derive(Debug, Parser)]
#[command(name = "smoothbench", version, about = "Benchmark and CNN baselines for edge-preserving smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with stand-in smoothers and simulated votes.
    Synth(SynthArgs),
    /// Check a dataset's manifest, files, dimensions and votes.
    Validate(DatasetArgs),
    /// Vote distribution tables: per method, per parameter, max repeats.
    Stats(StatsArgs),
    /// Leaderboard of minimum WRMSE and WMAE over methods and checkpoints.
    Evaluate(EvaluateArgs),
    /// WRMSE and WMAE of every parameter setting of one or all methods.
    Gridsearch(GridsearchArgs),
    /// Train a CNN baseline on the train split.
    Train(TrainArgs),
    /// Smooth one image with a checkpoint.
    Infer(InferArgs),
    /// Mean seconds per image of checkpoints or reference smoothers.
    Timeit(TimeitArgs),
    /// Tone-map an HDR radiance file.
    Tonemap(TonemapArgs),
    /// Brighten a low-light image through an illumination/reflectance split.
    Enhance(EnhanceArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricMode {
    /// Divide by the number of scalar entries (pixels × 3).
    Default,
    /// Divide by the number of pixels, with vector norms over channels.
    StrictPaper,
}

impl From<MetricMode> for PoolingMode {
    fn from(m: MetricMode) -> Self {
        match m {
            MetricMode::Default => PoolingMode::PerEntry,
            MetricMode::StrictPaper => PoolingMode::StrictPaper,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    L2,
    L1,
    L1Nb,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Reference {
    Gaussian,
    Bilateral,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, default_value = "dataset")]
    dataset: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
    /// JSON synthesis spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of images [default: 4].
    #[arg(long)]
    images: Option<usize>,
    /// How many of the last images form the test split [default: 1].
    #[arg(long)]
    test_images: Option<usize>,
    /// Image height [default: 64].
    #[arg(long)]
    height: Option<usize>,
    /// Image width [default: 64].
    #[arg(long)]
    width: Option<usize>,
    /// Random seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Votes per image [default: 14].
    #[arg(long)]
    votes_per_image: Option<usize>,
    /// Size of the simulated volunteer pool [default: 26].
    #[arg(long)]
    volunteers: Option<usize>,
    /// Every vote goes to this cell, given as M,P.
    #[arg(long, value_name = "M,P")]
    unanimous: Option<String>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Also write the statistics as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricArgs {
    /// Split to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Pooling convention of the metrics.
    #[arg(long, value_enum, default_value = "default")]
    mode: MetricMode,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Trained model to include, as NAME=PATH (repeatable).
    #[arg(long, value_name = "NAME=PATH")]
    checkpoint: Vec<String>,
    /// Leave out the seven grid methods.
    #[arg(long)]
    no_grid: bool,
    /// Also write the leaderboard rows as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridsearchArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Method index 1..=7; all methods when omitted.
    #[arg(long)]
    method: Option<u32>,
    /// Also write the per-setting results as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Starting configuration: vdcnn, resnet, vdcnn-mini or resnet-mini.
    #[arg(long, default_value = "resnet-mini")]
    preset: String,
    /// JSON training config replacing the preset; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Neighborhood-loss coefficient for l1-nb.
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Full-image validation on the test split every N steps.
    #[arg(long)]
    validation_interval: Option<u64>,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Training log output path (JSON lines).
    #[arg(long, default_value = "train.jsonl")]
    log: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct TimeitArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Trained model to time, as NAME=PATH (repeatable).
    #[arg(long, value_name = "NAME=PATH")]
    checkpoint: Vec<String>,
    /// Reference smoother to time (repeatable).
    #[arg(long, value_enum)]
    reference: Vec<Reference>,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Also write the timing rows as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SmootherArgs {
    /// Use a trained model as the smoother.
    #[arg(long, conflicts_with = "reference")]
    checkpoint: Option<PathBuf>,
    /// Use a reference smoother.
    #[arg(long, value_enum, default_value = "bilateral")]
    reference: Reference,
}

#[derive(Debug, Args)]
struct TonemapArgs {
    /// Radiance (.hdr) input.
    #[arg(long)]
    input: PathBuf,
    /// 8-bit PNG output.
    #[arg(long)]
    output: PathBuf,
    /// Scale applied to the base layer, in (0, 1].
    #[arg(long, default_value_t = smoothbench::applications::DEFAULT_COMPRESSION)]
    compression: f64,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Exponent applied to the illumination; below 1 brightens.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Service config with volunteers and tokens.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}
