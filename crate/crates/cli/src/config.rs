//! Config file sections and flag/file/default resolution.
//!
//! The file is TOML with optional sections `[window]`, `[model]`, `[train]`,
//! `[loader]`, `[split]` and `[eval]`. A flag beats the file, the file beats the
//! built-in default.

use std::path::Path;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use lungseg::augment::AugmentPolicy;
use lungseg::dataset::SplitRatios;
use lungseg::ingest::WindowSpec;
use lungseg::tensor::AdamConfig;
use lungseg::trainer::TrainConfig;
use lungseg::unet::UNetConfig;

use crate::UsageError;

pub const THREAD_CAP_VAR: &str = "LUNGSEG_MAX_THREADS";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub window: WindowFile,
    pub model: ModelFile,
    pub train: TrainFile,
    pub loader: LoaderFile,
    pub split: SplitFile,
    pub eval: EvalFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowFile {
    pub center: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFile {
    pub levels: Option<usize>,
    pub base_channels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dice_smooth: Option<f64>,
    pub seed: Option<u64>,
    pub black_frac: Option<f64>,
    pub finetune_epochs: Option<u64>,
    pub augment: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoaderFile {
    pub workers: Option<usize>,
    pub queue_ratio: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFile {
    pub ratios: Option<[f64; 3]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub threshold: Option<f64>,
}

pub fn load_file(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

#[derive(Args, Debug, Clone, Default)]
pub struct WindowArgs {
    /// Window center in HU [default: -500]
    #[arg(long, allow_hyphen_values = true)]
    pub window_center: Option<f64>,
    /// Window width in HU [default: 1600]
    #[arg(long)]
    pub window_width: Option<f64>,
}

impl WindowArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<WindowSpec, UsageError> {
        let d = WindowSpec::default();
        let spec = WindowSpec {
            center: self.window_center.or(file.window.center).unwrap_or(d.center),
            width: self.window_width.or(file.window.width).unwrap_or(d.width),
        };
        spec.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Resolution levels of the U-Net [default: 5]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Channels at the first level; doubles per level [default: 64]
    #[arg(long)]
    pub base_channels: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<UNetConfig, UsageError> {
        let d = UNetConfig::default();
        let cfg = UNetConfig {
            levels: self.levels.or(file.model.levels).unwrap_or(d.levels),
            base_channels: self.base_channels.or(file.model.base_channels).unwrap_or(d.base_channels),
            ..d
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct LoaderArgs {
    /// Loader worker threads [default: 2]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Prefetch capacity as a multiple of the batch size [default: 8]
    #[arg(long)]
    pub queue_ratio: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Training epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Samples per batch [default: 12]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Soft-Dice smoothing constant [default: 1.0]
    #[arg(long)]
    pub dice_smooth: Option<f64>,
    /// Seed for initialisation, shuffling and augmentation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of no-nodule training slices added for finetuning [default: 0.02]
    #[arg(long)]
    pub black_frac: Option<f64>,
    /// Finetuning epochs [default: 10]
    #[arg(long)]
    pub finetune_epochs: Option<u64>,
    /// Disable random flips and rotations
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub loader: LoaderArgs,
}

/// Worker cap from the environment, if set.
pub fn thread_cap() -> Result<Option<usize>, UsageError> {
    match std::env::var(THREAD_CAP_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| UsageError(format!("{THREAD_CAP_VAR} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl TrainArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<TrainConfig, UsageError> {
        let d = TrainConfig::default();
        let t = &file.train;
        let augment = if self.no_augment { false } else { t.augment.unwrap_or(true) };
        let mut workers = self.loader.workers.or(file.loader.workers).unwrap_or(d.workers);
        if let Some(cap) = thread_cap()? {
            if workers > cap {
                log::warn!("capping loader workers at {cap} ({THREAD_CAP_VAR})");
                workers = cap;
            }
        }
        let cfg = TrainConfig {
            epochs: self.epochs.or(t.epochs).unwrap_or(d.epochs),
            batch_size: self.batch_size.or(t.batch_size).unwrap_or(d.batch_size),
            adam: AdamConfig { lr: self.lr.or(t.lr).unwrap_or(d.adam.lr), ..d.adam },
            dice_smooth: self.dice_smooth.or(t.dice_smooth).unwrap_or(d.dice_smooth),
            seed: self.seed.or(t.seed).unwrap_or(d.seed),
            checkpoint_dir: None,
            black_frac: self.black_frac.or(t.black_frac).unwrap_or(d.black_frac),
            finetune_epochs: self.finetune_epochs.or(t.finetune_epochs).unwrap_or(d.finetune_epochs),
            workers,
            queue_ratio: self.loader.queue_ratio.or(file.loader.queue_ratio).unwrap_or(d.queue_ratio),
            augment: augment.then(AugmentPolicy::default),
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|v| format!("expected three comma-separated ratios, got {}", v.len()))
}

pub fn resolve_ratios(flag: Option<[f64; 3]>, file: &FileConfig) -> Result<SplitRatios, UsageError> {
    let d = SplitRatios::default();
    let [train, val, test] = flag.or(file.split.ratios).unwrap_or([d.train, d.val, d.test]);
    let r = SplitRatios { train, val, test };
    r.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(r)
}

pub fn resolve_threshold(flag: Option<f64>, file: &FileConfig) -> Result<f64, UsageError> {
    let t = flag.or(file.eval.threshold).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&t) {
        return Err(UsageError(format!("threshold must be in [0, 1], got {t}")));
    }
    Ok(t)
}

/// Logs the effective configuration of a command.
pub fn echo<T: Serialize>(command: &str, cfg: &T) {
    match toml::to_string(cfg) {
        Ok(text) => log::info!("effective config for `{command}`:\n{text}"),
        Err(e) => log::warn!("cannot render config: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        assert!(parse_ratios("0.8,0.2").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file: FileConfig = toml::from_str("[window]\ncenter = -600.0\nwidth = 1500.0\n").unwrap();
        let flags = WindowArgs { window_center: Some(-400.0), window_width: None };
        let spec = flags.resolve(&file).unwrap();
        assert_eq!((spec.center, spec.width), (-400.0, 1500.0));
        let spec = WindowArgs::default().resolve(&FileConfig::default()).unwrap();
        assert_eq!((spec.center, spec.width), (-500.0, 1600.0));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("[window]\ncentre = 1.0\n").is_err());
    }
}
