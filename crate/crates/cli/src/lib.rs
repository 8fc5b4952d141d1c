//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every flag appears in `--help`:
//!
//! ```
//! use clap::CommandFactory;
//! let mut root = chickface_cli::Cli::command();
//! root.build();
//! for cmd in std::iter::once(&root).chain(root.get_subcommands()) {
//!     let help = cmd.clone().render_long_help().to_string();
//!     let listed: std::collections::BTreeSet<&str> = help
//!         .split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
//!         .filter(|w| w.starts_with("--") && w.len() > 2)
//!         .map(|w| w.split('=').next().unwrap().split('<').next().unwrap())
//!         .collect();
//!     for arg in cmd.get_arguments() {
//!         if let Some(long) = arg.get_long() {
//!             assert!(listed.contains(format!("--{long}").as_str()), "`{}` help lacks --{long}", cmd.get_name());
//!         }
//!     }
//! }
//! ```

pub mod commands;
pub mod config;

use std::path::PathBuf;

use chickface::backbones::Backbone;
use chickface::classifier::FineTune;
use chickface::dataset::CropKind;
use chickface::parallel::Execution;
use chickface::synth::GenderFeature;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{ConfigError, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "chickface", version, about = "Chick face gender classification pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (JSON). Falls back to $PIPELINE_CONFIG, then defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic stage (overrides the config seeds).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `data_root`.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Overrides `output_root`.
    #[arg(long, global = true, value_name = "DIR")]
    pub output_root: Option<PathBuf>,
    /// Run stage-internal work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CropArg {
    Full,
    Middle,
}

impl From<CropArg> for CropKind {
    fn from(c: CropArg) -> Self {
        match c {
            CropArg::Full => CropKind::Full,
            CropArg::Middle => CropKind::Middle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    CombHeight,
    BeakWidth,
}

impl From<FeatureArg> for GenderFeature {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::CombHeight => GenderFeature::CombHeight,
            FeatureArg::BeakWidth => GenderFeature::BeakWidth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FineTuneArg {
    Full,
    HeadOnly,
}

impl From<FineTuneArg> for FineTune {
    fn from(f: FineTuneArg) -> Self {
        match f {
            FineTuneArg::Full => FineTune::Full,
            FineTuneArg::HeadOnly => FineTune::HeadOnly,
        }
    }
}

fn parse_backbone(s: &str) -> Result<Backbone, String> {
    Backbone::ALL
        .into_iter()
        .find(|b| b.as_str() == s)
        .ok_or_else(|| format!("unknown backbone `{s}`; one of {}", Backbone::ALL.map(|b| b.as_str()).join(", ")))
}

/// Classifier overrides shared by training and evaluation.
#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[arg(long, value_parser = parse_backbone)]
    pub backbone: Option<Backbone>,
    #[arg(long, value_enum, default_value = "full")]
    pub crop: CropArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub fine_tune: Option<FineTuneArg>,
    /// Safetensors backbone weights.
    #[arg(long, value_name = "FILE")]
    pub pretrained: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (stacked frames, labels, LabelMe annotations).
    SynthData {
        /// Output directory; defaults to the data root.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        ids: usize,
        /// Stacked frames per chick.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// 0 gives identical trait distributions per gender, 1 disjoint ones.
        #[arg(long, default_value_t = 0.9)]
        separability: f64,
        #[arg(long, value_enum, default_value = "comb-height")]
        feature: FeatureArg,
        #[arg(long, default_value_t = 12.0)]
        max_roll: f64,
        #[arg(long, default_value_t = 8)]
        noise: u8,
    },
    /// Split stacked frames into views and write the dataset manifest.
    Ingest {
        /// Directory of `<video>_<idx>.png` frames; defaults to `<data_root>/raw`.
        #[arg(long, value_name = "DIR")]
        raw: Option<PathBuf>,
        /// `video_id,chick_id,gender` CSV; defaults to `<data_root>/labels.csv`.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Mark every view as accepted instead of awaiting review.
        #[arg(long)]
        accept_all: bool,
    },
    /// Split one stacked frame into its three views.
    SplitViews {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the annotation service (and the static UI when given).
    ServeAnnotations {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// SQLite store; defaults to `<output_root>/annotations.sqlite`.
        #[arg(long, value_name = "FILE")]
        db: Option<PathBuf>,
        /// Directory of the built annotation UI.
        #[arg(long, value_name = "DIR")]
        ui: Option<PathBuf>,
        /// Write the store's quality flags and genders back to the manifest and exit.
        #[arg(long)]
        sync_manifest: bool,
    },
    /// Train the keypoint model on annotated views.
    TrainKeypoints {
        /// LabelMe files named `<frame_id>.json`; defaults to `<data_root>/annotations`.
        #[arg(long, value_name = "DIR")]
        annotations: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on a seeded random subset of at most this many views.
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Detect the face in every accepted view.
    Detect {
        #[arg(long)]
        model_ref: Option<String>,
        #[arg(long)]
        input_size: Option<u32>,
        #[arg(long)]
        conf_threshold: Option<f64>,
    },
    /// Locate keypoints and rotate every detected face upright.
    Align {
        /// Keypoint model; defaults to `<output_root>/models/keypoints.safetensors`.
        #[arg(long, value_name = "FILE")]
        keypoints_model: Option<PathBuf>,
        /// Use annotated keypoints from this LabelMe directory instead of a model.
        #[arg(long, value_name = "DIR")]
        annotations: Option<PathBuf>,
    },
    /// Cut full or middle face crops from the aligned views.
    Crop {
        #[arg(long, value_enum)]
        kind: CropArg,
        #[arg(long)]
        margin_scale: Option<f64>,
        #[arg(long)]
        mask_radius_factor: Option<f64>,
    },
    /// Train one classifier, holding out one fold for epoch selection.
    TrainClassifier {
        #[command(flatten)]
        classifier: ClassifierArgs,
        /// Held-out fold; defaults to the last.
        #[arg(long)]
        val_fold: Option<usize>,
    },
    /// Grouped k-fold cross-validation of one backbone on one crop kind.
    Evaluate {
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        classifier: ClassifierArgs,
    },
    /// Grad-CAM++ maps for a trained classifier.
    Explain {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        crop: CropArg,
        /// Target layer; defaults to the backbone's last convolution.
        #[arg(long)]
        layer: Option<String>,
        /// Explain at most this many crops.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Render the comparison tables from every saved evaluation.
    Report,
}

/// How a failed invocation ends.
#[derive(Debug)]
pub enum Failure {
    /// Invalid configuration or arguments; exit code 2.
    Usage(String),
    /// A stage failed; exit code 1.
    Stage(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Stage(_) => 1,
        }
    }

    /// One-line JSON written to stderr.
    pub fn to_json(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Stage(e) => ("stage", format!("{e:#}")),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Usage(c.0),
            Err(e) => Failure::Stage(e),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::resolve(cli.global.config.as_deref())?.with_seed(cli.global.seed);
    if let Some(d) = cli.global.data_root {
        cfg.data_root = d;
    }
    if let Some(o) = cli.global.output_root {
        cfg.output_root = o;
    }
    let exec = if cli.global.sequential { Execution::Sequential } else { Execution::default() };
    cfg.validate()?;
    commands::dispatch(cli.command, cfg, exec).map_err(Failure::from)
}
