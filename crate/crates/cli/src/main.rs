//! `tucan` — train, finetune, and run the capsule U-net colouriser.
//!
//! Exit codes are a contract: 0 on success, 2 for configuration problems
//! (the message names the first offending key), 3 for broken artifacts
//! (unreadable checkpoints, images, or datasets).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, EvalSource};
use config::Settings;

#[derive(Parser)]
#[command(name = "tucan", version, about = "Capsule U-net image colourisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (sectioned key=value text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single values, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Override both the weight-init and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::load(self.config.as_deref(), &self.set)?;
        s.override_seed(self.seed);
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch (end-to-end or progressive).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training scheme: end_to_end or progressive.
        #[arg(long)]
        scheme: Option<String>,
        /// Output directory for the manifest and checkpoint.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Continue training a checkpoint with slow-conv/fast-capsule rates.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the manifest and checkpoint.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Colourise images with a trained checkpoint.
    Colorize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the outputs (default: next to each input).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Images to colourise (PNG/JPEG/BMP).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint (or a stub) on a dataset.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint (omit when using --stub).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replace the model: "perfect" (true chroma) or "gray" (zero chroma).
        #[arg(long)]
        stub: Option<String>,
        /// External perceptual scorer command (overrides eval.lpips).
        #[arg(long = "lpips-plugin")]
        lpips_plugin: Option<String>,
        /// Output directory for the report.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the shape plan of a config, or the header of a checkpoint.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Inspect this checkpoint instead of the configured network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, scheme, out } => {
            let mut settings = cfg.settings()?;
            settings.override_scheme(scheme.as_deref())?;
            commands::cmd_train(&settings, &out)
        }
        Command::Finetune { cfg, checkpoint, out } => {
            let settings = cfg.settings()?;
            commands::cmd_finetune(&settings, &checkpoint, &out)
        }
        Command::Colorize { cfg, checkpoint, out, inputs } => {
            let settings = cfg.settings()?;
            commands::cmd_colorize(&settings, &checkpoint, &inputs, out.as_deref())
        }
        Command::Evaluate { cfg, checkpoint, stub, lpips_plugin, out } => {
            let settings = cfg.settings()?;
            let source = match (&stub, &checkpoint) {
                (Some(kind), _) => match kind.as_str() {
                    "perfect" => EvalSource::PerfectStub,
                    "gray" => EvalSource::GrayStub,
                    other => {
                        return Err(CliError::Config(format!(
                            "--stub: unknown stub {other:?} (expected perfect or gray)"
                        )));
                    }
                },
                (None, Some(ck)) => EvalSource::Checkpoint(ck),
                (None, None) => {
                    return Err(CliError::Config(
                        "--checkpoint: required unless --stub is given".into(),
                    ));
                }
            };
            commands::cmd_evaluate(&settings, source, lpips_plugin.as_deref(), &out)
        }
        Command::Inspect { cfg, checkpoint } => match checkpoint {
            Some(path) => commands::cmd_inspect_checkpoint(&path),
            None => {
                let settings = cfg.settings()?;
                commands::cmd_inspect_config(&settings)
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Artifact(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
