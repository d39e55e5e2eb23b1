//! `pda`: prediction difference analysis from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pda", version, about = "Conditional-sampling saliency maps for image classifiers")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Fit the patch Gaussian used for conditional sampling.
    FitStats(FitStatsArgs),
    /// Compute a Weight of Evidence map for one image.
    Analyze(AnalyzeArgs),
    /// Render a map as a red/blue heatmap image.
    Render(RenderArgs),
    /// Write a two-class dataset with a planted bright square.
    Synth(SynthArgs),
    /// Train the linear-softmax baseline on a labeled image folder.
    TrainBaseline(TrainArgs),
    /// Score how much positive evidence lands on annotated regions.
    EvalLocalization(EvalArgs),
    /// Analyze one image at several window sizes.
    Sweep(SweepArgs),
    /// Check an external adapter against the wire protocol.
    ServeCheck(ServeCheckArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Flat key=value file; flags on the command line override its entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct FitStatsArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Folder of training images (png/ppm/pgm).
    #[arg(long)]
    pub images: PathBuf,
    /// Optional image_id,label CSV restricting the corpus.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Keep only manifest rows with this label.
    #[arg(long, requires = "manifest")]
    pub label: Option<String>,
    /// Patch edge: window size plus twice the padding.
    #[arg(long, default_value_t = 19)]
    pub patch_edge: usize,
    /// Patches sampled when the corpus has more positions than this.
    #[arg(long, default_value_t = 20000)]
    pub max_patches: usize,
    /// Ridge added to the covariance diagonal.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PGS1 file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Classifier, sampler and window options shared by analyze and sweep.
#[derive(Args, Debug, Clone)]
pub struct EngineArgs {
    /// constant:P1,P2,..  |  lsw:WEIGHTS  |  external:COMMAND
    #[arg(long)]
    pub classifier: String,
    /// Comma-separated class names (default: from weights side-car, or ISIC names for K=7).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Target class, by name or index.
    #[arg(long = "class")]
    pub class: String,
    /// gaussian | mean | constant:V | discrete:V1,V2,.. | exhaustive:V1,V2,..
    #[arg(long, default_value = "gaussian")]
    pub sampler: String,
    /// Padding around the window used for conditioning.
    #[arg(long, default_value_t = 2)]
    pub pad: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Samples per window position.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training-set size for the Laplace correction.
    #[arg(long, default_value_t = 7010)]
    pub laplace_n: u64,
    /// Worker threads (default: all cores).
    #[arg(long, env = "PDA_WORKERS")]
    pub workers: Option<usize>,
    /// Corrupted images per classifier call.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// PGS1 patch model (needed by the gaussian sampler).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub win: usize,
    /// Output WEM1 map; report and resolved config are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub map: PathBuf,
    /// symmetric_max | pNN | percentile:NN
    #[arg(long, default_value = "symmetric_max")]
    pub normalize: String,
    /// Blend the heatmap over this image.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub edge: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// tl | tr | bl | br
    #[arg(long, default_value = "tl")]
    pub quadrant: String,
    /// Half-width of the uniform pixel noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Folder with images and a manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest path (default: DATA/manifest.csv).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Class names in index order (default: order of first appearance).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    /// Mini-batch size (default: full batch).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train/validation/test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.1,0.2")]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output LSW1 weights.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Folder of <image_id>.wem maps.
    #[arg(long)]
    pub maps: PathBuf,
    /// CSV with image_id and x,y,w,h region columns.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Positive-mass fraction an image needs to count as localized.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    pub wins: Vec<usize>,
    /// Image folder the gaussian sampler is fitted on, once per window size.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 20000)]
    pub max_patches: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Output folder for win<NN>.wem maps.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ServeCheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Adapter command, run through sh -c.
    #[arg(long)]
    pub command: String,
    /// Random classify round-trips.
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seconds to wait for each reply.
    #[arg(long, default_value_t = 20)]
    pub timeout: u64,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let raw: Vec<_> = std::env::args_os().collect();
    let args = match config::expand_args(&cmd, raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            return ExitCode::from(2);
        }
    };
    let matches = match cmd.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", one_line(text.lines().next().unwrap_or("invalid arguments")));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let resolved = config::resolved_config(sub, sub_matches);
    match commands::run(cli.command, &resolved) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
