//! Command-line surface for the RGBD saliency pipeline.
//!
//! Subcommands: train, infer, refine, eval, synth, segment. Exit codes:
//! 0 success, 2 input error, 3 model error, 4 numerical error. Logging goes
//! to stderr, controlled by RSDF_LOG (error|info|debug).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rsdf_core::{Error, PipelineConfig};

#[derive(Parser)]
#[command(name = "rsdf", about = "RGBD salient-object detection pipeline")]
struct Cli {
    /// JSON pipeline configuration; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for image-level loops (1 = fully sequential).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing rgb/, depth/ and gt/ with matching names.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the model, loss log and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the model already present in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    dropout_keep: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Disable every augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Single image mode: RGB input.
    #[arg(long)]
    rgb: Option<PathBuf>,
    /// Single image mode: depth input.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Single image mode: output saliency PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory mode: dataset root (rgb/, depth/).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory mode: output directory for per-image saliency PNGs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Emit the raw CNN probability map instead of the propagated one.
    #[arg(long)]
    no_propagation: bool,
    /// Additionally write the pre-propagation map next to the output
    /// (suffix `_init.png`).
    #[arg(long)]
    save_init: bool,
    /// Debug: dump packed feature patches (binary records).
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Debug: dump the propagation affinity as Matrix Market text.
    #[arg(long)]
    dump_affinity: Option<PathBuf>,
    /// Debug: dump seeds and scores as CSV.
    #[arg(long)]
    dump_seeds: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    /// External per-pixel saliency map (8-bit gray PNG).
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    /// Output PNG for the refined map.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted saliency PNGs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth mask PNGs with matching names.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for curve.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// Dataset label in the summary CSV.
    #[arg(long, default_value = "dataset")]
    name: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root (rgb/, depth/, gt/ are created).
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(short = 'n', long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    /// Superpixel target (any value; this command is not tied to the CNN).
    #[arg(short = 'n', long)]
    superpixels: usize,
    /// Output 16-bit label map PNG.
    #[arg(long)]
    out_labels: PathBuf,
    /// Optional region statistics CSV.
    #[arg(long)]
    out_stats: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the saliency network on a labeled dataset.
    Train(TrainArgs),
    /// Produce saliency maps with a trained model.
    Infer(InferArgs),
    /// Refine an external saliency map by propagation.
    Refine(RefineArgs),
    /// Score predicted maps against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic RGBD dataset with exact ground truth.
    Synth(SynthArgs),
    /// Superpixel segmentation only.
    Segment(SegmentArgs),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Model(_) => 3,
        Error::NoConvergence { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("RSDF_LOG", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };

    let result = match &cli.command {
        Command::Train(args) => commands::train(args, config),
        Command::Infer(args) => commands::infer(args, config, cli.jobs),
        Command::Refine(args) => commands::refine(args, config),
        Command::Eval(args) => commands::eval(args, config),
        Command::Synth(args) => commands::synth(args, config),
        Command::Segment(args) => commands::segment(args, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
