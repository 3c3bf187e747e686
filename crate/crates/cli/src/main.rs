//! `pinsight`: one entry point for every pipeline stage.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{Layer, UsageError};

#[derive(Debug, Parser)]
#[command(name = "pinsight", version, about = "Covered-hand PIN inference pipeline", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config file; environment and flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if absent). Defaults to pinsight-out/<subcommand>.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed, recorded in every artifact.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-recording stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus in the ingest layout.
    SynthGen(SynthGenArgs),
    /// Scan a dataset root and write its manifest.
    Ingest(DataArgs),
    /// Detect keypress times from feedback audio.
    Detect(DetectArgs),
    /// Cut 11-frame keypress samples.
    Segment(SegmentArgs),
    /// Train a model on a scenario split.
    Train(TrainArgs),
    /// Predict per-digit distributions.
    Predict(PredictArgs),
    /// Rank candidate PINs from per-digit distributions.
    Rank(RankArgs),
    /// Evaluate on a scenario split, training first unless a model is given.
    Evaluate(EvaluateArgs),
    /// Re-render plots and a summary table from evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long, env = "PINSIGHT_DATA")]
    pub data: Option<PathBuf>,
    /// Recording metadata file (default: <data>/metadata.json).
    #[arg(long)]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SplitArgs {
    #[arg(long, value_parser = ["single", "independent", "mixed"])]
    pub scenario: Option<String>,
    /// Train/val/test participant fractions, e.g. 4,1,1.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub blacklist_in_train: Option<bool>,
    #[arg(long, value_parser = ["left", "center", "right"])]
    pub camera: Option<String>,
    #[arg(long, value_parser = ["side", "over", "top", "all"])]
    pub covering: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct KnobArgs {
    /// Percentage of key rows hidden by a shield.
    #[arg(long)]
    pub shield: Option<u32>,
    /// Side of the downscaled model input.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Keypress-timing error level.
    #[arg(long)]
    pub frame_error_k: Option<u32>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Network size.
    #[arg(long, value_parser = ["small", "full"])]
    pub model: Option<String>,
    /// Side of the preprocessed keypad crop.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 6)]
    pub participants: usize,
    #[arg(long, default_value_t = 20)]
    pub pins: usize,
    #[arg(long, default_value_t = 5)]
    pub pin_len: usize,
    /// 0 removes all digit information from the video.
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    /// Keypad models, cycled over participants.
    #[arg(long = "keypad", value_parser = ["d8201f", "d8203b"], default_values_t = ["d8201f".to_string()])]
    pub keypads: Vec<String>,
    /// Feedback tone for every recording, overriding the keypad default.
    #[arg(long)]
    pub feedback_freq: Option<f64>,
    /// Participant indices to mark as blacklisted.
    #[arg(long = "blacklist")]
    pub blacklist: Vec<usize>,
    /// Video container for generated recordings.
    #[arg(long, value_parser = ["raw", "encoded"], default_value = "raw")]
    pub container: String,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Detector center frequency, overriding each recording's tone.
    #[arg(long)]
    pub feedback_freq: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub knobs: KnobArgs,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub feedback_freq: Option<f64>,
    /// Keypress timing source.
    #[arg(long, value_parser = ["audio", "keylog"])]
    pub timing: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, value_parser = ["audio", "keylog"])]
    pub timing: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Sample archives written by `segment`; otherwise recordings under --data.
    #[arg(long, conflicts_with = "data")]
    pub samples: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub knobs: KnobArgs,
    #[arg(long, value_parser = ["audio", "keylog"])]
    pub timing: Option<String>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// JSON array with one entry per position: ten probabilities, or an
    /// object of digit → probability with the rest spread uniformly.
    #[arg(long)]
    pub dists: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, value_parser = ["product", "swap"])]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub knobs: KnobArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Evaluate this model instead of training one.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long, value_parser = ["product", "swap"])]
    pub strategy: Option<String>,
    /// Evaluate over every level of one knob.
    #[arg(long, value_parser = ["none", "shield", "frame-error", "resolution"], default_value = "none")]
    pub sweep: String,
    #[arg(long, value_parser = ["audio", "keylog"])]
    pub timing: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json, or a directory searched for them.
    #[arg(long)]
    pub input: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Ingest(_) => "ingest",
            Command::Detect(_) => "detect",
            Command::Segment(_) => "segment",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Rank(_) => "rank",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }

    /// Flag (and environment) values as a settings layer.
    pub fn layer(&self) -> Layer {
        let mut l = Layer::default();
        let data = |l: &mut Layer, d: &DataArgs| {
            l.data = d.data.clone();
            l.metadata = d.metadata.clone();
        };
        let split = |l: &mut Layer, s: &SplitArgs| {
            l.scenario = s.scenario.clone();
            l.ratios = s.ratios.clone();
            l.blacklist_in_train = s.blacklist_in_train;
            l.camera = s.camera.clone();
            l.covering = s.covering.clone();
        };
        let knobs = |l: &mut Layer, k: &KnobArgs| {
            l.shield = k.shield;
            l.resolution = k.resolution;
            l.frame_error_k = k.frame_error_k;
        };
        let model = |l: &mut Layer, m: &ModelArgs| {
            l.model = m.model.clone();
            l.size = m.size;
            l.epochs = m.epochs;
        };
        match self {
            Command::SynthGen(a) => l.feedback_freq = a.feedback_freq,
            Command::Ingest(a) => data(&mut l, a),
            Command::Detect(a) => {
                data(&mut l, &a.data);
                l.feedback_freq = a.feedback_freq;
            }
            Command::Segment(a) => {
                data(&mut l, &a.data);
                knobs(&mut l, &a.knobs);
                l.size = a.size;
                l.feedback_freq = a.feedback_freq;
                l.timing = a.timing.clone();
            }
            Command::Train(a) => {
                data(&mut l, &a.data);
                split(&mut l, &a.split);
                model(&mut l, &a.model);
                l.resolution = a.resolution;
                l.timing = a.timing.clone();
            }
            Command::Predict(a) => {
                data(&mut l, &a.data);
                knobs(&mut l, &a.knobs);
                l.timing = a.timing.clone();
            }
            Command::Rank(a) => l.strategy = a.strategy.clone(),
            Command::Evaluate(a) => {
                data(&mut l, &a.data);
                split(&mut l, &a.split);
                knobs(&mut l, &a.knobs);
                model(&mut l, &a.model);
                l.strategy = a.strategy.clone();
                l.timing = a.timing.clone();
            }
            Command::Report(_) => {}
        }
        l
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("usage error: {u}");
                eprintln!("Run `pinsight --help` for usage.");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
