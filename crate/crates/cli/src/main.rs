mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stexpr::filter::{DEFAULT_MIN_SPOT_TOTAL, DEFAULT_PANEL_SIZE};
use stexpr::model::{HeadLoss, TrunkVariant};

#[derive(Parser, Debug)]
#[command(
    name = "stexpr",
    version,
    about = "Gene-expression prediction from histology patches"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "STEXPR_THREADS")]
    threads: Option<usize>,
    /// Global seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset with a learnable image signal.
    SynthFixture(SynthArgs),
    /// Assemble sections from a manifest into a spot archive.
    Ingest(IngestArgs),
    /// Normalize every PNG in a directory to a target image's stain profile.
    StainNormalize(StainArgs),
    /// Gene/spot filtering, panel selection and target encoding.
    Filter(FilterArgs),
    /// Cut spot-centred patches and reject background.
    ExtractPatches(ExtractArgs),
    /// Train a model on a patch store and target table.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Patient-level k-fold cross-validation.
    CrossValidate(CvArgs),
    /// Draw a gene's predicted expression over a tissue image.
    Render(RenderArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradientCheck(GradCheckArgs),
    /// Category counts, histograms and top-gene tables across reports.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Spots per section.
    #[arg(long, default_value_t = 64)]
    spots: usize,
    /// Main genes.
    #[arg(long, default_value_t = 20)]
    genes: usize,
    #[arg(long, default_value_t = 30)]
    aux_genes: usize,
    #[arg(long, default_value_t = 1)]
    patients: usize,
    /// Sections per patient.
    #[arg(long, default_value_t = 1)]
    sections: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 32)]
    patch_size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Orientation of the count tables: `rows` (genes × spots) or `cols`.
    #[arg(long, default_value = "rows")]
    genes_as: String,
    /// Keep genes without a symbol mapping under their original id.
    #[arg(long)]
    keep_unmapped: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StainArgs {
    /// Image whose stain profile every input is mapped to.
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optical-density threshold for tissue pixels.
    #[arg(long, default_value_t = 0.15)]
    beta: f64,
    /// Sparsity penalty for stain-basis learning.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Skip luminosity standardization before estimation.
    #[arg(long)]
    no_luminosity: bool,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_SPOT_TOTAL)]
    min_spot_counts: u64,
    #[arg(long, default_value_t = DEFAULT_PANEL_SIZE)]
    top_genes: usize,
    /// Patient whose spots form the test split.
    #[arg(long)]
    heldout: Option<String>,
    /// Filtered archive.
    #[arg(long)]
    out: PathBuf,
    /// Panel JSON (default: next to `--out`).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Target table JSON (default: next to `--out`).
    #[arg(long)]
    targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    archive: PathBuf,
    /// Directory of `<section_id>.png` images.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 224)]
    size: u32,
    #[arg(long, default_value_t = 200)]
    white_threshold: u8,
    #[arg(long, default_value_t = 0.5)]
    white_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrunkArgs {
    #[arg(long, default_value = "conv")]
    trunk: TrunkVariant,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Residual conv blocks.
    #[arg(long)]
    residual: bool,
    /// Compound scaling exponent; overrides depth/width/resolution.
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    #[arg(long, default_value_t = 1.1)]
    beta_scale: f64,
    #[arg(long, default_value_t = 1.15)]
    gamma: f64,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Weight of the auxiliary loss.
    #[arg(long, default_value_t = 40.0)]
    lambda: f64,
    #[arg(long, default_value = "mse")]
    head_loss: HeadLoss,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Disable flip/rotation augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[command(flatten)]
    trunk: TrunkArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value = "test")]
    split: stexpr::Split,
    /// Name recorded in the report (default: checkpoint directory name).
    #[arg(long)]
    tag: Option<String>,
    /// Include auxiliary-head predictions in the output.
    #[arg(long)]
    emit_aux: bool,
    /// Report JSON; a per-gene CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    /// Filtered spot archive.
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    heldout: String,
    #[arg(long, default_value_t = DEFAULT_PANEL_SIZE)]
    top_genes: usize,
    #[command(flatten)]
    trunk: TrunkArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    tag: Option<String>,
    /// Output directory for the fold plan, fold reports and summary CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Report JSON written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    gene: String,
    #[arg(long)]
    image: PathBuf,
    /// Spot archive holding the pixel coordinates.
    #[arg(long)]
    spots: PathBuf,
    /// Section to draw (default: the image file stem).
    #[arg(long)]
    section: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Disc radius in pixels (default: half the median neighbour distance).
    #[arg(long)]
    radius: Option<f64>,
    /// Also write the bare heatmap here.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value = "conv")]
    trunk: TrunkVariant,
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value = "mse")]
    head_loss: HeadLoss,
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    main_genes: usize,
    #[arg(long, default_value_t = 2)]
    aux_genes: usize,
    /// Fail when the maximum relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Test-split reports written by `evaluate`.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Matching train-split reports, for the error table.
    #[arg(long, num_args = 1..)]
    train_reports: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let stage = commands::stage_name(&cli.command);
    match commands::run(cli.command, cli.seed) {
        Ok(mut summary) => {
            summary["stage"] = stage.into();
            summary["status"] = "ok".into();
            summary["seed"] = cli.seed.into();
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e
                .downcast_ref::<stexpr::Error>()
                .map_or("failure", stexpr::Error::kind);
            let line = serde_json::json!({
                "stage": stage,
                "status": "error",
                "seed": cli.seed,
                "kind": kind,
                "error": format!("{e:#}"),
            });
            println!("{line}");
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
