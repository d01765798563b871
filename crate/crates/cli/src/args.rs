//! Command-line flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ssatt::data::{SceneStyle, SyntheticSpec};
use ssatt::network::{LayerMask, DEFAULT_PATCH};
use ssatt::training::{LossWeights, Precision, TrainConfig};

use crate::pipeline::Variant;

#[derive(Debug, Parser)]
#[command(name = "ssatt", version, about = "Attention-aided two-branch CNN for hyperspectral patch classification")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads for prediction and for the independent runs of an ablation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    /// `key = value` file of flags for the subcommand; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, label map and split.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, log and train-set metrics.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Render a classification map as a binary PPM.
    #[command(args_override_self = true)]
    Map(MapArgs),
    /// Train all sixteen attention variants over several seeds.
    #[command(args_override_self = true)]
    Ablation(AblationArgs),
    /// Check every backward rule against central finite differences.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for scene.hsi, labels.lbl and split.txt.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene height.
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    /// Scene width.
    #[arg(long, default_value_t = 64)]
    pub w: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub blobs: usize,
    #[arg(long, default_value_t = 4.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 9.0)]
    pub radius_max: f64,
    /// Standard deviation of the white noise added to every band.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Scale of class-specific spectral structure.
    #[arg(long, default_value_t = 2.5)]
    pub separation: f64,
    /// Amplitude of the smooth brightness field, in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    pub illumination: f64,
    #[arg(long, default_value_t = 0.15)]
    pub train_fraction: f64,
    /// blobs, spectral (uniform regions, spectra only) or texture (regions, gratings only).
    #[arg(long, default_value = "blobs")]
    pub style: SceneStyle,
    /// Placement attempts per blob before giving up.
    #[arg(long, default_value_t = 1000)]
    pub max_retries: usize,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.h,
            width: self.w,
            bands: self.bands,
            classes: self.classes,
            blobs_per_class: self.blobs,
            radius: (self.radius_min, self.radius_max),
            noise_std: self.noise,
            separation: self.separation,
            illumination: self.illumination,
            train_fraction: self.train_fraction,
            style: self.style,
            seed: self.seed,
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub split: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Fine-tuning epochs for ssatt; defaults to --epochs.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Odd patch side length.
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
    /// f32 or f64 arithmetic during training; checkpoints store f32.
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    /// Deep-supervision weights of the layer 1, 2 and 3 heads.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.01, 0.1, 1.0])]
    pub gammas: Vec<f64>,
}

impl TrainOpts {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            finetune_epochs: self.finetune_epochs,
            seed,
            precision: self.precision,
            patch_size: self.patch,
        }
    }

    pub fn weights(&self) -> ssatt::Result<LossWeights> {
        let g: [f64; 3] = self.gammas.as_slice().try_into().map_err(|_| {
            ssatt::Error::InvalidArgument(format!("need three loss weights, got {}", self.gammas.len()))
        })?;
        LossWeights::new(g)
    }

    pub fn header(&self) -> String {
        let g: Vec<String> = self.gammas.iter().map(f64::to_string).collect();
        format!(
            "epochs={} finetune_epochs={} batch={} lr={} patch={} precision={} gammas={}",
            self.epochs,
            self.finetune_epochs.unwrap_or(self.epochs),
            self.batch,
            self.lr,
            self.patch,
            self.precision.name(),
            g.join(",")
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Variant::Ssatt)]
    pub variant: Variant,
    /// Attended layers, e.g. 1,3; all three for attention variants by default.
    #[arg(long)]
    pub layers: Option<LayerMask>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Output directory for model.ssac, train.log and train_metrics.{txt,csv}.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitPart {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Which side of the split to score.
    #[arg(long, value_enum, default_value_t = SplitPart::Test)]
    pub on: SplitPart,
    /// Directory for report.txt, report.csv and predictions.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    /// Split whose training pixels fix the band standardization.
    #[arg(long, value_name = "FILE")]
    pub split: PathBuf,
    /// Label map; only labeled pixels are predicted unless --all is given.
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Predict every pixel.
    #[arg(long)]
    pub all: bool,
    /// Output PPM image.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Optional `row,col,predicted` dump of the drawn pixels.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Directory for ablation.txt, ablation.csv and ablation.log.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random shapes per primitive op.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    /// Elements checked per parameter tensor of the full model.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Break the backward rule of one op (for testing the checker).
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}
