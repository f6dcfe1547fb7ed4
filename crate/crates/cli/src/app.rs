//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Mode, Overrides, PipelineConfig, BACKEND_ENV};
use crate::pipeline::{cmd_build_matrix, cmd_eval, cmd_run, cmd_serve_stub, MatrixOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "opendet",
    version,
    about = "Novel object detection pipeline over exported detector outputs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Log output format on stderr.
    #[arg(long, value_enum, default_value_t = LogFormat::Text, global = true)]
    pub log_format: LogFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed the class vocabulary and cache the class-text matrix.
    BuildMatrix(Common),
    /// Fuse, label and refine every image; writes final.jsonl.
    Run(Common),
    /// Score predictions against the ground truth; writes report.json and report.md.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predictions to score instead of the run's final.jsonl.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Serve the deterministic stub scene over stdin/stdout.
    ServeStub {
        #[command(flatten)]
        common: Common,
        /// Name of a weaker encoder variant; changes the backend identity.
        #[arg(long, requires = "roi_noise")]
        variant: Option<String>,
        /// Noise amplitude on matched ROI embeddings for the variant.
        #[arg(long, requires = "variant")]
        roi_noise: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Final detections kept per image.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Backend endpoint: `stub`, `tcp://host:port` or `exec:<command line>`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub no_gdino: bool,
    #[arg(long)]
    pub no_sam: bool,
    #[arg(long)]
    pub no_srm: bool,
    #[arg(long)]
    pub no_saeg: bool,
    #[arg(long)]
    pub no_bg_labelling: bool,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            k: self.k,
            temperature: self.temperature,
            workers: self.workers,
            backend: self.backend.clone(),
            no_gdino: self.no_gdino,
            no_sam: self.no_sam,
            no_srm: self.no_srm,
            no_saeg: self.no_saeg,
            no_bg_labelling: self.no_bg_labelling,
        }
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        let env = std::env::var(BACKEND_ENV).ok().filter(|v| !v.is_empty());
        cfg.apply(&self.overrides(), env)?;
        Ok(cfg)
    }
}

pub fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildMatrix(c) => {
            let (outcome, calls) = cmd_build_matrix(&c.config()?)?;
            let word = match outcome {
                MatrixOutcome::CacheHit => "cache hit",
                MatrixOutcome::Built => "built",
                MatrixOutcome::Rebuilt => "rebuilt",
            };
            println!("class matrix {word} ({calls} backend calls)");
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(c) => {
            let summary = cmd_run(&c.config()?)?;
            println!(
                "{} images, {} detections written to {}",
                summary.images,
                summary.detections,
                summary.final_path.display()
            );
            if summary.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "{} image(s) failed; see run_errors.jsonl",
                    summary.failures.len()
                );
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Eval {
            common,
            predictions,
        } => {
            let cfg = common.config()?;
            let report = cmd_eval(&cfg, predictions.as_deref())?;
            print!("{}", report.to_markdown(cfg.mode == Mode::CocoOvd));
            Ok(ExitCode::SUCCESS)
        }
        Command::ServeStub {
            common,
            variant,
            roi_noise,
        } => {
            let cfg = common.config()?;
            let v = variant.as_deref().zip(roi_noise);
            cmd_serve_stub(&cfg, v)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
