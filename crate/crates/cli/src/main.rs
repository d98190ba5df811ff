use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fat_cli::stages::{self, CalibrateSettings, EvalReport, FinetuneSettings, TrainFloatSettings, TransformSettings};
use fat_cli::{CliError, Result, Work};
use fat_core::quant::{Granularity, QuantMode, QuantScheme};
use fat_core::train::FloatTrainConfig;
use fat_core::tune::{TrainConfig, TrainGroups};

/// Int8 quantization with trainable thresholds.
#[derive(Parser)]
#[command(name = "fatq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the bundled MNIST network in float.
    TrainFloat {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output directory for model.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train on the first N images only.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Fold batch norm and rescale depthwise layers.
    Transform {
        #[command(flatten)]
        work: WorkArg,
        #[command(flatten)]
        t: TransformArgs,
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Record activation ranges and derive initial parameters.
    Calibrate {
        #[command(flatten)]
        work: WorkArg,
        #[command(flatten)]
        q: SchemeArgs,
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        images: PathBuf,
    },
    /// Fine-tune thresholds and scales against the float model.
    Finetune {
        #[command(flatten)]
        work: WorkArg,
        #[command(flatten)]
        f: FinetuneArgs,
        /// Seed for the fine-tune subset and batch order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images: PathBuf,
    },
    /// Compile to the integer model file.
    Compile {
        #[command(flatten)]
        work: WorkArg,
    },
    /// Compare float, fake-quant and integer paths.
    Eval {
        #[command(flatten)]
        work: WorkArg,
        #[arg(long)]
        images: PathBuf,
        /// Labels, to report accuracy.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Every stage from transform through eval.
    Pipeline {
        #[command(flatten)]
        work: WorkArg,
        #[command(flatten)]
        t: TransformArgs,
        #[command(flatten)]
        q: SchemeArgs,
        #[command(flatten)]
        f: FinetuneArgs,
        #[command(flatten)]
        s: SampleArgs,
        /// Training images for calibration and fine-tuning.
        #[arg(long)]
        images: PathBuf,
        /// Evaluation images; defaults to --images.
        #[arg(long)]
        test_images: Option<PathBuf>,
        /// Labels for the evaluation images, to report accuracy.
        #[arg(long)]
        test_labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkArg {
    /// Work directory shared by all stages.
    #[arg(long)]
    work: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    /// Float model (model.json) to quantize.
    #[arg(long)]
    model: PathBuf,
    /// Fold every batch norm into the layer before it.
    #[arg(long)]
    fold_bn: bool,
    /// Equalize depthwise filter ranges; needs --images.
    #[arg(long)]
    dws_rescale: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Images drawn for calibration and the depthwise rescale statistics.
    #[arg(long, default_value_t = 100)]
    calib_size: usize,
    /// Seed for every sampled subset and shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sym,
    Asym,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gran {
    Scalar,
    Vector,
}

#[derive(Args)]
struct SchemeArgs {
    #[arg(long, value_enum, default_value = "sym")]
    mode: Mode,
    /// Weight granularity for every layer. When omitted, depthwise layers
    /// are per-channel and the rest per-tensor.
    #[arg(long, value_enum)]
    granularity: Option<Gran>,
    #[arg(long, default_value_t = 8)]
    bits: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Train {
    Thresholds,
    Pointwise,
    Both,
    None,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Trainable group; `none` skips fine-tuning in a pipeline.
    #[arg(long, value_enum, default_value = "thresholds")]
    train: Train,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Share of the images used for fine-tuning.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
}

impl TransformArgs {
    fn settings(&self, s: &SampleArgs) -> TransformSettings {
        TransformSettings {
            fold_bn: self.fold_bn,
            dws_rescale: self.dws_rescale,
            calib_size: s.calib_size,
            seed: s.seed,
        }
    }
}

impl SchemeArgs {
    fn settings(&self, s: &SampleArgs) -> Result<CalibrateSettings> {
        if !(2..=8).contains(&self.bits) {
            return Err(CliError::FlagConflict(format!("--bits {} outside 2..=8", self.bits)));
        }
        let mode = match self.mode {
            Mode::Sym => QuantMode::Symmetric,
            Mode::Asym => QuantMode::Asymmetric,
        };
        let mut scheme = QuantScheme {
            bits: self.bits,
            mode,
            ..QuantScheme::default()
        };
        if let Some(g) = self.granularity {
            let g = match g {
                Gran::Scalar => Granularity::PerTensor,
                Gran::Vector => Granularity::PerChannel { axis: 0 },
            };
            scheme.weights = g;
            scheme.depthwise = g;
        }
        Ok(CalibrateSettings {
            scheme,
            calib_size: s.calib_size,
            seed: s.seed,
        })
    }
}

impl FinetuneArgs {
    /// `None` when fine-tuning is skipped.
    fn settings(&self, seed: u64) -> Option<FinetuneSettings> {
        let train = match self.train {
            Train::Thresholds => TrainGroups::Thresholds,
            Train::Pointwise => TrainGroups::Pointwise,
            Train::Both => TrainGroups::Both,
            Train::None => return None,
        };
        Some(FinetuneSettings {
            train: TrainConfig {
                epochs: self.epochs,
                batch: self.batch,
                lr: self.lr,
                seed,
                train,
                ..TrainConfig::default()
            },
            fraction: self.fraction,
        })
    }
}

fn print_eval(r: &EvalReport) {
    let line = |name: &str, p: &stages::PathReport| match p.accuracy {
        Some(a) => println!("{name:>10}: accuracy {a:.4}, rmse {:.6}", p.rmse),
        None => println!("{name:>10}: rmse {:.6}", p.rmse),
    };
    println!("eval on {} images", r.samples);
    line("float", &r.float);
    if let Some(p) = &r.fake_quant {
        line("fake-quant", p);
    }
    if let Some(p) = &r.int8 {
        line("int8", p);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainFloat {
            images,
            labels,
            out,
            epochs,
            batch,
            lr,
            seed,
            limit,
        } => {
            let settings = TrainFloatSettings {
                arch: "mnist_cnn".into(),
                train: FloatTrainConfig {
                    epochs,
                    batch,
                    lr,
                    seed,
                },
                limit,
            };
            stages::train_float(&images, &labels, &out, &settings)?;
        }
        Command::Transform { work, t, s, images } => {
            stages::transform(&Work::new(work.work)?, &t.model, images.as_deref(), &t.settings(&s))?;
        }
        Command::Calibrate { work, q, s, images } => {
            stages::calibrate(&Work::new(work.work)?, &images, &q.settings(&s)?)?;
        }
        Command::Finetune { work, f, seed, images } => {
            let settings = f
                .settings(seed)
                .ok_or_else(|| CliError::FlagConflict("--train none leaves nothing to fine-tune".into()))?;
            stages::finetune(&Work::new(work.work)?, &images, &settings)?;
        }
        Command::Compile { work } => {
            stages::compile(&Work::new(work.work)?)?;
        }
        Command::Eval { work, images, labels } => {
            print_eval(&stages::eval(&Work::new(work.work)?, &images, labels.as_deref())?);
        }
        Command::Pipeline {
            work,
            t,
            q,
            f,
            s,
            images,
            test_images,
            test_labels,
        } => {
            if test_labels.is_some() && test_images.is_none() {
                return Err(CliError::FlagConflict("--test-labels needs --test-images".into()));
            }
            let calib = q.settings(&s)?;
            let w = Work::new(work.work)?;
            stages::transform(&w, &t.model, Some(&images), &t.settings(&s))?;
            stages::calibrate(&w, &images, &calib)?;
            match f.settings(s.seed) {
                Some(s) => {
                    stages::finetune(&w, &images, &s)?;
                }
                None => w.clear(&[w.finetune(), w.train_log()])?,
            }
            stages::compile(&w)?;
            let eval_images = test_images.unwrap_or(images);
            print_eval(&stages::eval(&w, &eval_images, test_labels.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
