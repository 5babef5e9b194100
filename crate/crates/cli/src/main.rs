//! `lungseg` command-line driver.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Bad flags, config values or environment. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "lungseg", version, about = "Lung-nodule CT segmentation: ingest, split, train, evaluate and benchmark")]
pub struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v debug, -vv trace)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset of disks on a flat background
    Synth(commands::SynthArgs),
    /// Window DICOM slices into 8-bit PNGs with a metadata sidecar
    Ingest(commands::IngestArgs),
    /// Catalog image/mask pairs under a dataset root
    Manifest(commands::ManifestArgs),
    /// Assign patients to training/validation/test splits
    Split(commands::SplitArgs),
    /// Count nodules per split and diameter bin
    Stats(commands::StatsArgs),
    /// Train a U-Net on the nodule slices of the training split
    Train(commands::TrainCmdArgs),
    /// Continue training with a fraction of no-nodule slices added
    Finetune(commands::FinetuneArgs),
    /// Score thresholded predictions with Dice and IoU
    Eval(commands::EvalArgs),
    /// Render TP/FN/FP overlays of predictions against ground truth
    Overlay(commands::OverlayArgs),
    /// Measure loader throughput over worker and queue-size grids
    BenchSweep(commands::SweepArgs),
    /// Time training epochs and per-image inference
    BenchTime(commands::TimeArgs),
    /// Compare analytic gradients against central differences
    Gradcheck(commands::GradcheckArgs),
}

/// Joins the cause chain, skipping causes already spelled out by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).target(env_logger::Target::Stderr).init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
