//! `cfanet` — one binary tying the pipeline together: dataset synthesis,
//! groundtruth rendering, training, evaluation, gradient checks, and
//! ablations. Outputs land in a run directory with the resolved config
//! echoed beside them; identical commands with identical seeds and inputs
//! produce byte-identical artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical abort (non-finite values or a failed gradient
//! check). `CFANET_THREADS` caps scene-generation parallelism.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use cfanet::experiments::{AblationAxis, ExperimentError};
use cfanet::groundtruth::GroundTruthError;
use cfanet::io::FormatError;
use cfanet::losses::{LossError, LossKind};
use cfanet::metrics::MetricsError;
use cfanet::model::ModelError;
use cfanet::synth::SynthError;
use cfanet::tensor::TensorError;
use cfanet::train::TrainError;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

// ── errors → exit codes ──────────────────────────────────────────────────

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or parameter values (exit 1).
    Usage(String),
    /// Unreadable or malformed data files (exit 2).
    Data(String),
    /// Non-finite numbers or a failed gradient check (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GroundTruthError> for CliError {
    fn from(e: GroundTruthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) | ModelError::BadInput(_) => CliError::Usage(e.to_string()),
            ModelError::BadParameters(_) => CliError::Data(e.to_string()),
            ModelError::Tensor(t) => t.into(),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::BadInput(_) | LossError::NoStages => CliError::Usage(e.to_string()),
            LossError::Model(m) => m.into(),
            LossError::Tensor(t) => t.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::BadConfig(_) | TrainError::BadInput(_) => CliError::Usage(e.to_string()),
            TrainError::EmptyDataset => CliError::Data(e.to_string()),
            TrainError::Groundtruth(g) => g.into(),
            TrainError::Format(f) => f.into(),
            TrainError::Loss(l) => l.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Groundtruth(g) => g.into(),
            MetricsError::Model(m) => m.into(),
            MetricsError::Loss(l) => l.into(),
            MetricsError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::BadRecipe(_) | ExperimentError::BadAxis(_) => {
                CliError::Usage(e.to_string())
            }
            ExperimentError::Synth(s) => s.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Metrics(m) => m.into(),
            ExperimentError::Model(m) => m.into(),
        }
    }
}

// ── argument grammar ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "cfanet",
    version,
    about = "Crowd-density estimation: synthetic data, training, evaluation, and ablations",
    propagate_version = true
)]
struct Cli {
    /// Flat-key JSON config file; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for data generation, weight init, and training [default: 0]
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory [default: runs/<subcommand>-<unix-seconds>]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset (PPM images + manifest.json)
    Synth(SynthArgs),
    /// Render groundtruth rasters from a manifest: density (.dmap), crowd
    /// mask and density-class maps (.pgm)
    Gengt(GengtArgs),
    /// Train a model and write a checkpoint (use --epochs 0 for init only)
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Finite-difference verification of every op and the full loss graph
    Gradcheck(GradcheckArgs),
    /// Train every arm of one ablation axis and tabulate the results
    Ablate(AblateArgs),
    /// Shorthand for `ablate` over the density-loss axis
    CompareLosses(CompareLossesArgs),
}

/// Network architecture flags (all optional; defaults in brackets).
#[derive(Args, Clone, Default)]
pub struct NetFlags {
    /// Density-level classes k [default: 6]
    #[arg(long)]
    pub k: Option<usize>,
    /// Channel width multiplier in (0, 1] [default: 1.0]
    #[arg(long)]
    pub width_mult: Option<f64>,
    /// Input image channels [default: 3]
    #[arg(long)]
    pub input_channels: Option<usize>,
    /// Dilation of the estimator trunk [default: 2]
    #[arg(long)]
    pub dilation: Option<usize>,
    /// Std-dev of the Gaussian weight init [default: 0.01]
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Keep the coarse attention branch [default: true]
    #[arg(long, value_name = "BOOL")]
    pub use_crr: Option<bool>,
    /// Keep the fine attention branch [default: true]
    #[arg(long, value_name = "BOOL")]
    pub use_dle: Option<bool>,
}

/// Training flags (all optional; defaults in brackets).
#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    /// Training epochs [default: 500]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate [default: 2e-5]
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Epochs between learning-rate halvings [default: 100]
    #[arg(long)]
    pub lr_halving_period: Option<usize>,
    /// Density target expansion factor [default: 50]
    #[arg(long)]
    pub expansion: Option<f64>,
    /// Random-crop side as a fraction of the image [default: 0.5]
    #[arg(long)]
    pub crop_fraction: Option<f64>,
    /// Horizontal flip probability [default: 0.5]
    #[arg(long)]
    pub flip_prob: Option<f64>,
    /// Samples per gradient-averaging batch [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Supervised decoder stages, e.g. `4` or `1,2,3,4` [default: 1,2,3,4]
    #[arg(long, value_parser = parse_supervision, value_name = "STAGES")]
    pub supervision: Option<[bool; 4]>,
    /// Include the background-mass term in the loss [default: true]
    #[arg(long, value_name = "BOOL")]
    pub enable_bl: Option<bool>,
    /// Density loss: bsl, sl_only, mse, ssim_only [default: bsl]
    #[arg(long, value_parser = parse_loss_kind, value_name = "KIND")]
    pub loss_kind: Option<LossKind>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenes to generate [default: 8]
    #[arg(long)]
    n_images: Option<usize>,
    /// Scene width in pixels [default: 96]
    #[arg(long)]
    width: Option<usize>,
    /// Scene height in pixels [default: 96]
    #[arg(long)]
    height: Option<usize>,
    /// Minimum people per scene [default: 8]
    #[arg(long)]
    people_min: Option<usize>,
    /// Maximum people per scene [default: 20]
    #[arg(long)]
    people_max: Option<usize>,
    /// Comma-separated layout cycle: uniform, clustered, gradient
    /// [default: uniform,clustered,gradient]
    #[arg(long, value_delimiter = ',', value_parser = parse_layout, value_name = "LIST")]
    layouts: Option<Vec<cfanet::synth::Layout>>,
    /// Comma-separated background cycle: flat, textured-noise,
    /// geometric-clutter [default: flat,textured-noise]
    #[arg(long, value_delimiter = ',', value_parser = parse_background, value_name = "LIST")]
    backgrounds: Option<Vec<cfanet::synth::Background>>,
    /// Smallest head radius in pixels [default: 2]
    #[arg(long)]
    radius_min: Option<f64>,
    /// Largest head radius in pixels [default: 3.5]
    #[arg(long)]
    radius_max: Option<f64>,
    /// Recipe preset: mixed (default backgrounds) or cluttered
    /// (head-like background shapes) [default: mixed]
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Args)]
struct GengtArgs {
    /// Dataset manifest (annotations JSON)
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Density-level classes for the class map [default: 6]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (annotations JSON)
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    net: NetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest (annotations JSON)
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Density target expansion factor used in training [default: 50]
    #[arg(long)]
    expansion: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum allowed relative error [default: 1e-4]
    #[arg(long)]
    tol: Option<f64>,
    /// Central-difference half step [default: 1e-5]
    #[arg(long)]
    step: Option<f64>,
    /// Probes per parameter tensor in the full-graph check [default: 4]
    #[arg(long)]
    max_elems: Option<usize>,
    /// Skip the op suite and check only the full loss graph
    #[arg(long)]
    graph_only: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Axis to sweep: branches, supervision, k, loss, bl
    #[arg(long, value_parser = parse_axis, value_name = "AXIS")]
    axis: AblationAxis,
    #[command(flatten)]
    data: AblateData,
    #[command(flatten)]
    net: NetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct CompareLossesArgs {
    #[command(flatten)]
    data: AblateData,
    #[command(flatten)]
    net: NetFlags,
    #[command(flatten)]
    train: TrainFlags,
}

/// Where ablation data comes from: manifests when given, otherwise
/// synthesized on the fly from the master seed.
#[derive(Args)]
struct AblateData {
    /// Comma-separated training seeds, one run per arm and seed [default: 1]
    #[arg(long, value_delimiter = ',', value_parser = parse_seed, value_name = "LIST")]
    seeds: Option<Vec<u64>>,
    /// Training manifest (otherwise scenes are synthesized)
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Held-out manifest (otherwise cluttered scenes are synthesized)
    #[arg(long, value_name = "PATH")]
    held_out_manifest: Option<PathBuf>,
    /// Synthesized training scenes [default: 8]
    #[arg(long)]
    train_images: Option<usize>,
    /// Synthesized held-out scenes; 0 skips held-out evaluation [default: 8]
    #[arg(long)]
    held_out_images: Option<usize>,
    /// Synthesized scene side in pixels [default: 96]
    #[arg(long)]
    image_size: Option<usize>,
}

// ── flag value parsers ───────────────────────────────────────────────────

fn parse_supervision(s: &str) -> Result<[bool; 4], String> {
    let mut mask = [false; 4];
    for part in s.split(',') {
        match part.trim().parse::<usize>() {
            Ok(stage @ 1..=4) => mask[stage - 1] = true,
            _ => return Err(format!("bad stage `{part}` (stages are 1..=4, e.g. `1,2,3,4`)")),
        }
    }
    Ok(mask)
}

fn parse_loss_kind(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: LossError| e.to_string())
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse().map_err(|e: ExperimentError| e.to_string())
}

fn parse_seed(s: &str) -> Result<u64, String> {
    s.trim().parse().map_err(|_| format!("bad seed `{s}`"))
}

fn parse_layout(s: &str) -> Result<cfanet::synth::Layout, String> {
    s.trim().parse().map_err(|e: SynthError| e.to_string())
}

fn parse_background(s: &str) -> Result<cfanet::synth::Background, String> {
    s.trim().parse().map_err(|e: SynthError| e.to_string())
}

// ── dispatch ─────────────────────────────────────────────────────────────

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth(args) => commands::synth(&cfg, args, &cli.out),
        Command::Gengt(args) => commands::gengt(&cfg, args, &cli.out),
        Command::Train(args) => {
            cfg.apply_net(&args.net);
            cfg.apply_train(&args.train);
            commands::train(&cfg, args, &cli.out)
        }
        Command::Eval(args) => commands::eval(&cfg, args, &cli.out),
        Command::Gradcheck(args) => commands::gradcheck(&cfg, args),
        Command::Ablate(args) => {
            cfg.apply_net(&args.net);
            cfg.apply_train(&args.train);
            commands::ablate(&cfg, args.axis, &args.data, &cli.out)
        }
        Command::CompareLosses(args) => {
            cfg.apply_net(&args.net);
            cfg.apply_train(&args.train);
            commands::ablate(&cfg, AblationAxis::Loss, &args.data, &cli.out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}
