//! Command-line surface: dataset generation, pretraining, fine-tuning,
//! linear evaluation, protocol comparisons and gradient verification.
//!
//! Exit codes: 0 success, 2 configuration error (including argument
//! parsing), 3 I/O or file-format error, 4 numerical abort, 5 gradient
//! tolerance breach.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthcl_core::error::Result;
use depthcl_core::pipeline::TrainMode;
use depthcl_core::scalar::NumericWidth;

use commands::{CommandOutcome, InitSource};
use config::{load_config_file, resolve, Overrides, ResolvedRun, RunConfigFile};

const DATA_ENV: &str = "DEPTHCL_DATA";

#[derive(Parser)]
#[command(
    name = "depthcl",
    about = "Contrastive pretraining on depth/reflectance image pairs, with downstream material classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Run configuration file (TOML). Flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric width: 32 or 64.
    #[arg(long)]
    width: Option<u32>,
    /// Hyperparameter preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    crop_size: Option<usize>,
}

#[derive(Args, Clone)]
struct DataOpts {
    /// Dataset directory holding manifest.tsv (default: $DEPTHCL_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataOpts {
    fn dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or_else(|| {
            depthcl_core::error::Error::Config(format!(
                "no --data directory given and {DATA_ENV} is unset"
            ))
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic conveyor-belt dataset.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Multiplier on the per-class base counts.
        #[arg(long)]
        scale: Option<f64>,
        /// Square image extent.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Contrastive pretraining on the unlabeled pool.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Run-record output path (default: <out>.run.tsv).
        #[arg(long)]
        record: Option<PathBuf>,
        /// Held-out fold excluded from the pretraining pool.
        #[arg(long, default_value_t = 0)]
        test_fold: usize,
    },
    /// Supervised fine-tuning of encoder and classifier.
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Initial weights: a checkpoint path, or "random".
        #[arg(long)]
        init: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Use the 10/10/20 semi-supervised split instead of 60/20/20.
        #[arg(long)]
        semi: bool,
        #[arg(long, default_value_t = 0)]
        test_fold: usize,
    },
    /// Classifier training over a frozen encoder.
    LinearEval {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Initial weights: a checkpoint path, or "random".
        #[arg(long)]
        init: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        semi: bool,
        #[arg(long, default_value_t = 0)]
        test_fold: usize,
    },
    /// Run a full two-arm comparison protocol.
    Protocol {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// FT-full, FT-semi, LE-full or LE-semi.
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify gradients of the full losses against central differences.
    Gradcheck {
        /// Fault-injection negative control: bias the analytic gradients so
        /// the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn resolve_common(common: &CommonOpts, mode: TrainMode, extra: Overrides) -> Result<ResolvedRun> {
    let file: Option<RunConfigFile> = match &common.config {
        Some(path) => Some(load_config_file(path)?),
        None => None,
    };
    let preset: Option<&'static str> = match common.preset.as_deref() {
        Some("desk") => Some("desk"),
        Some("paper") => Some("paper"),
        Some(other) => {
            return Err(depthcl_core::error::Error::Config(format!(
                "unknown preset {other}; valid presets: desk, paper"
            )))
        }
        None => None,
    };
    let overrides = Overrides {
        width: common.width,
        preset,
        seed: common.seed,
        epochs: common.epochs,
        batch_size: common.batch_size,
        learning_rate: common.learning_rate,
        crop_size: common.crop_size,
        ..extra
    };
    resolve(file.as_ref(), &overrides, mode)
}

fn dispatch(command: &Command) -> Result<CommandOutcome> {
    match command {
        Command::GenData {
            common,
            out,
            scale,
            image_size,
        } => {
            let run = resolve_common(
                common,
                TrainMode::Pretrain,
                Overrides {
                    scale: *scale,
                    image_size: *image_size,
                    ..Overrides::default()
                },
            )?;
            commands::cmd_gen_data(&run, out, run.train.seed)
        }
        Command::Pretrain {
            common,
            data,
            out,
            record,
            test_fold,
        } => {
            let run = resolve_common(common, TrainMode::Pretrain, Overrides::default())?;
            let dir = data.dir()?;
            match run.width {
                NumericWidth::Bits64 => {
                    commands::cmd_pretrain::<f64>(&run, &dir, out, record.as_deref(), *test_fold)
                }
                NumericWidth::Bits32 => {
                    commands::cmd_pretrain::<f32>(&run, &dir, out, record.as_deref(), *test_fold)
                }
            }
        }
        Command::Finetune {
            common,
            data,
            init,
            out,
            semi,
            test_fold,
        }
        | Command::LinearEval {
            common,
            data,
            init,
            out,
            semi,
            test_fold,
        } => {
            let mode = if matches!(command, Command::Finetune { .. }) {
                TrainMode::Finetune
            } else {
                TrainMode::LinearEval
            };
            let run = resolve_common(common, mode, Overrides::default())?;
            let dir = data.dir()?;
            let source = if init == "random" {
                InitSource::Random
            } else {
                InitSource::Checkpoint(Path::new(init))
            };
            match run.width {
                NumericWidth::Bits64 => commands::cmd_downstream::<f64>(
                    &run, mode, &dir, source, out, *semi, *test_fold,
                ),
                NumericWidth::Bits32 => commands::cmd_downstream::<f32>(
                    &run, mode, &dir, source, out, *semi, *test_fold,
                ),
            }
        }
        Command::Protocol {
            common,
            data,
            name,
            out,
        } => {
            let run = resolve_common(common, TrainMode::Pretrain, Overrides::default())?;
            let dir = data.dir()?;
            match run.width {
                NumericWidth::Bits64 => commands::cmd_protocol::<f64>(&run, name, &dir, out),
                NumericWidth::Bits32 => commands::cmd_protocol::<f32>(&run, name, &dir, out),
            }
        }
        Command::Gradcheck { corrupt } => commands::cmd_gradcheck(*corrupt),
    }
}

use std::path::Path;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(CommandOutcome::Ok) => ExitCode::SUCCESS,
        Ok(CommandOutcome::NumericalAbort(msg)) => {
            eprintln!("numerical abort: {msg}");
            ExitCode::from(4)
        }
        Ok(CommandOutcome::ToleranceBreach(msg)) => {
            eprintln!("tolerance breach: {msg}");
            ExitCode::from(5)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code_for(&err) as u8)
        }
    }
}
