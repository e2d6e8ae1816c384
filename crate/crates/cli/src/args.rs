use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reid_core::{Protocol, Split};

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Cloth-changing person re-identification toolkit")]
pub struct Cli {
    /// Worker threads for data loading and per-sample compute. 0 forces the
    /// deterministic single-threaded mode.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic stick-figure dataset.
    Toygen(ToygenArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Export per-stage embeddings as JSON lines.
    Extract(ExtractArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toygen(_) => "toygen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Extract(_) => "extract",
        }
    }
}

#[derive(Debug, Args)]
pub struct ToygenArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(2..))]
    pub ids: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(2..))]
    pub outfits: u32,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub images: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(2..))]
    pub cams: u32,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x32", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneKind {
    Tiny,
    Deep,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root containing train/, query/ and gallery/.
    #[arg(long)]
    pub data: PathBuf,
    /// Keypoint file in JSON-lines format, one record per image.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Run directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = BackboneKind::Deep)]
    pub backbone: BackboneKind,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 40)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Random-erasing probability.
    #[arg(long, default_value_t = 0.5)]
    pub erasing_prob: f64,
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the shape embedding with a learned constant vector.
    #[arg(long)]
    pub no_se: bool,
    /// Replace pairwise relation reasoning with a per-joint MLP.
    #[arg(long)]
    pub no_rn: bool,
    /// Fix the cloth/identity split at one half.
    #[arg(long)]
    pub no_attn: bool,
    /// Insert a single block after the last stage only.
    #[arg(long)]
    pub single_cesd: bool,
    /// Continue from a checkpoint written by an earlier run with the same flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Minimum detector confidence for a joint to count as detected.
    #[arg(long, default_value_t = reid_core::keypoints::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset root containing train/, query/ and gallery/.
    #[arg(long)]
    pub data: PathBuf,
    /// Keypoint file in JSON-lines format, one record per image.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `standard` or `cloth-changing`.
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Protocol,
    /// Output directory; defaults to `<checkpoint dir>/eval_<protocol>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_rank: u64,
    /// Minimum detector confidence for a joint to count as detected.
    #[arg(long, default_value_t = reid_core::keypoints::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset root containing train/, query/ and gallery/.
    #[arg(long)]
    pub data: PathBuf,
    /// Keypoint file in JSON-lines format, one record per image.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    /// Splits to export, in order.
    #[arg(long, value_delimiter = ',', value_parser = parse_split, default_value = "train,query,gallery")]
    pub splits: Vec<Split>,
    /// Minimum detector confidence for a joint to count as detected.
    #[arg(long, default_value_t = reid_core::keypoints::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad dimension `{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: reid_core::ReidError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: reid_core::ReidError| e.to_string())
}
