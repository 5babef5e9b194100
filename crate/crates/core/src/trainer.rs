//! Soft-Dice training loop, best-on-validation selection and black-mask finetuning.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::dataset::{training_view, DatasetError, Manifest, Split, ViewSample};
use crate::loader::{Loader, LoaderConfig, LoaderError, SampleSource};
use crate::tensor::{AdamConfig, Real, Tensor, TensorError};
use crate::unet::{self, Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dice loss: shapes {pred} and {target} differ")]
    ShapeMismatch { pred: String, target: String },
    #[error("dice loss: prediction {value} at index {index} is outside [0, 1]")]
    PredictionRange { index: usize, value: f64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u64, batch: usize },
    #[error("no no-nodule samples available for finetuning")]
    NoBlackSamples,
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Mean over the batch of per-sample soft-Dice losses
/// `1 − (2Σpg + s)/(Σp + Σg + s)`, and its gradient with respect to `pred`.
pub fn dice_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<(f64, Tensor<T>), TrainError> {
    if pred.shape() != target.shape() {
        return Err(TrainError::ShapeMismatch { pred: pred.shape().to_string(), target: target.shape().to_string() });
    }
    if let Some((index, &v)) = pred.data().iter().enumerate().find(|(_, v)| !(**v >= T::zero() && **v <= T::one())) {
        return Err(TrainError::PredictionRange { index, value: v.to_f64_lossy() });
    }
    let n = pred.shape().n;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (p, g) = (pred.item(i), target.item(i));
        let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in p.iter().zip(g) {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            inter += a * b;
            sp += a;
            sg += b;
        }
        let num = 2.0 * inter + smooth;
        let den = sp + sg + smooth;
        total += 1.0 - num / den;
        let len = p.len();
        let out = &mut grad.data_mut()[i * len..(i + 1) * len];
        for (o, &b) in out.iter_mut().zip(g) {
            let d = -(2.0 * b.to_f64_lossy() * den - num) / (den * den);
            *o = T::lit(d / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dice_smooth: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub black_frac: f64,
    pub finetune_epochs: u64,
    pub workers: usize,
    pub queue_ratio: usize,
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 12,
            adam: AdamConfig::default(),
            dice_smooth: 1.0,
            seed: 0,
            checkpoint_dir: None,
            black_frac: 0.02,
            finetune_epochs: 10,
            workers: 2,
            queue_ratio: 8,
            augment: Some(AugmentPolicy::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        if !(self.black_frac > 0.0 && self.black_frac <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("black_frac must be in (0, 1], got {}", self.black_frac)));
        }
        self.adam.validate()?;
        self.train_loader().validate()?;
        Ok(())
    }

    /// Shuffled, augmented loader settings for the training view.
    pub fn train_loader(&self) -> LoaderConfig {
        LoaderConfig {
            batch_size: self.batch_size,
            workers: self.workers,
            queue_ratio: self.queue_ratio,
            shuffle: true,
            shuffle_seed: self.seed,
            augment: self.augment.clone(),
        }
    }

    /// Ordered, unaugmented loader settings for validation and evaluation.
    pub fn eval_loader(&self) -> LoaderConfig {
        self.train_loader().for_eval()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
    /// Wall-clock of the training pass alone, excluding validation.
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<u64>,
    pub best_val_loss: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.6}", r.epoch, r.train_loss, val, r.seconds);
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    /// `true` if two histories agree on everything except wall-clock fields.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.train_loss.to_bits() == b.train_loss.to_bits() && a.val_loss.map(f64::to_bits) == b.val_loss.map(f64::to_bits)
            })
    }
}

pub struct TrainOutcome<T: Real> {
    /// Parameters of the epoch with the lowest validation loss, or the last epoch
    /// without a validation view.
    pub best: Model<T>,
    pub history: TrainHistory,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Sample-weighted mean Dice loss over one unaugmented pass of `loader`.
pub fn mean_loss<S: SampleSource, T: Real>(model: &Model<T>, loader: &mut Loader<S>, epoch: u64, smooth: f64) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, batch) in loader.epoch::<T>(epoch).enumerate() {
        let batch = batch?;
        let probs = model.forward(&batch.images)?;
        let (loss, _) = dice_loss(&probs, &batch.masks, smooth)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b });
        }
        let n = batch.sample_ids.len();
        sum += loss * n as f64;
        count += n;
    }
    Ok(sum / count.max(1) as f64)
}

/// One training pass: forward, Dice loss, backward and an Adam step per batch.
/// Returns the sample-weighted mean training loss.
pub fn train_epoch<S: SampleSource, T: Real>(
    model: &mut Model<T>,
    loader: &mut Loader<S>,
    adam: &AdamConfig,
    smooth: f64,
    epoch: u64,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, batch) in loader.epoch::<T>(epoch).enumerate() {
        let batch = batch?;
        model.zero_grad();
        let cache = model.forward_train(&batch.images)?;
        let (loss, grad) = dice_loss(&cache.probs, &batch.masks, smooth)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b });
        }
        model.backward(&cache, &grad)?;
        model.adam_step(adam).map_err(|e| match e {
            TensorError::NonFiniteGradient { .. } => TrainError::NonFiniteLoss { epoch, batch: b },
            other => other.into(),
        })?;
        let n = batch.sample_ids.len();
        sum += loss * n as f64;
        count += n;
    }
    Ok(sum / count.max(1) as f64)
}

fn ensure_dir(dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })
}

/// Trains `model` for `epochs`, selecting the epoch with the lowest validation loss.
/// `on_epoch` sees each record as it is produced.
pub fn train_with<S: SampleSource, T: Real>(
    model: &mut Model<T>,
    train: &mut Loader<S>,
    mut val: Option<&mut Loader<S>>,
    cfg: &TrainConfig,
    epochs: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        ensure_dir(dir)?;
    }
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let train_loss = train_epoch(model, train, &cfg.adam, cfg.dice_smooth, epoch)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let val_loss = match val.as_deref_mut() {
            Some(v) => Some(mean_loss(model, v, epoch, cfg.dice_smooth)?),
            None => None,
        };
        let improved = match (val_loss, history.best_val_loss) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            history.best_epoch = Some(epoch);
            history.best_val_loss = val_loss;
            best = model.clone();
            if let (Some(dir), Some(_)) = (&cfg.checkpoint_dir, val_loss) {
                unet::save(model, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        let record = EpochRecord { epoch, train_loss, val_loss, seconds: t0.elapsed().as_secs_f64(), train_seconds };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_loss {} ({:.2}s)",
            val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            record.seconds
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        unet::save(model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { best, history })
}

/// [`train_with`] for `cfg.epochs` without a progress callback.
pub fn train<S: SampleSource, T: Real>(
    model: &mut Model<T>,
    train: &mut Loader<S>,
    val: Option<&mut Loader<S>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    train_with(model, train, val, cfg, cfg.epochs, &mut |_| {})
}

/// Training view for finetuning: all nodule samples of the training split plus
/// `ceil(black_frac · k)` of its `k` no-nodule samples.
pub fn finetune_view(m: &Manifest, cfg: &TrainConfig) -> Result<Vec<ViewSample>, TrainError> {
    let black = m.indices(Split::Training).into_iter().filter(|&i| !m.samples[i].has_nodule).count();
    if black == 0 {
        return Err(TrainError::NoBlackSamples);
    }
    Ok(training_view(m, Split::Training, cfg.black_frac, cfg.seed)?)
}

/// Continues training for `cfg.finetune_epochs` with fresh Adam state and returns the
/// final model. Writes `final.ckpt` when a checkpoint directory is configured.
pub fn finetune<S: SampleSource, T: Real>(
    model: &mut Model<T>,
    train: &mut Loader<S>,
    val: Option<&mut Loader<S>>,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    model.reset_optimizer();
    let ft_cfg = TrainConfig { checkpoint_dir: None, ..cfg.clone() };
    let out = train_with(model, train, val, &ft_cfg, cfg.finetune_epochs.max(1), &mut |_| {})?;
    if let Some(dir) = &cfg.checkpoint_dir {
        ensure_dir(dir)?;
        unet::save(model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(out.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let s = Shape::new(1, 1, 2, 2);
        let g = t(s, &[1.0, 0.0, 1.0, 1.0]);
        let (l, _) = dice_loss(&g, &g, 1.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let s = Shape::new(1, 1, 1, 10);
        let (l, _) = dice_loss(&Tensor::zeros(s), &Tensor::full(s, 1.0), 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / 11.0)).abs() < 1e-15);
        let s = Shape::new(1, 1, 2, 2);
        let (l, _) = dice_loss(&Tensor::full(s, 0.5), &t(s, &[1.0, 1.0, 0.0, 0.0]), 1.0).unwrap();
        assert!((l - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3));
        assert!(matches!(dice_loss(&a, &b, 1.0), Err(TrainError::ShapeMismatch { .. })));
        let p = Tensor::full(Shape::new(1, 1, 2, 2), 1.5);
        assert!(matches!(dice_loss(&p, &a, 1.0), Err(TrainError::PredictionRange { index: 0, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dice_smooth: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { black_frac: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn history_csv_shape() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 0, train_loss: 0.5, val_loss: Some(0.25), seconds: 1.0, train_seconds: 0.8 }],
            best_epoch: Some(0),
            best_val_loss: Some(0.25),
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,seconds\n0,0.5,0.25,1.000000\n");
        assert_eq!(h.to_jsonl().lines().count(), 1);
    }
}
