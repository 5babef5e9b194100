//! Loader parameter sweep and training/inference timing.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::dataset::ViewSample;
use crate::loader::{Batch, Delayed, Loader, LoaderConfig, LoaderError, SampleSource};
use crate::tensor::{Real, Shape, Tensor};
use crate::trainer::{mean_loss, train_epoch, TrainConfig, TrainError};
use crate::unet::{Model, ModelError};

/// Default upper bound on producer threads per sweep cell.
pub const DEFAULT_WORKER_CAP: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid sweep: {0}")]
    InvalidGrid(String),
    #[error("{requested} workers requested, cap is {cap}")]
    WorkerCap { requested: usize, cap: usize },
    #[error("cell workers={workers} queue_ratio={queue_ratio}: delivered {delivered} samples, expected {expected}")]
    Delivery { workers: usize, queue_ratio: usize, delivered: usize, expected: usize },
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepConfig {
    pub workers: Vec<usize>,
    pub queue_ratios: Vec<usize>,
    /// Timed epochs per cell; one extra warmup epoch runs first and is discarded.
    pub epochs_per_cell: usize,
    pub batch_size: usize,
    pub decode_delay: Duration,
    pub worker_cap: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            workers: vec![1, 2, 4],
            queue_ratios: vec![2, 4, 8, 16],
            epochs_per_cell: 3,
            batch_size: 12,
            decode_delay: Duration::ZERO,
            worker_cap: DEFAULT_WORKER_CAP,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.workers.is_empty() || self.queue_ratios.is_empty() {
            return Err(BenchError::InvalidGrid("workers and queue ratio grids must be nonempty".into()));
        }
        if self.epochs_per_cell == 0 {
            return Err(BenchError::InvalidGrid("epochs_per_cell must be >= 1".into()));
        }
        if let Some(&w) = self.workers.iter().find(|&&w| w > self.worker_cap) {
            return Err(BenchError::WorkerCap { requested: w, cap: self.worker_cap });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub workers: usize,
    pub queue_ratio: usize,
    /// Median over the timed epochs.
    pub epoch_seconds: f64,
    pub samples_per_sec: f64,
    pub mean_wait: f64,
    pub max_occupancy: usize,
    pub capacity: usize,
    /// Samples delivered over all timed epochs.
    pub delivered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Row with the smallest median epoch time.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().min_by(|a, b| a.epoch_seconds.total_cmp(&b.epoch_seconds))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("workers,queue_ratio,epoch_seconds,samples_per_sec,mean_wait,max_occupancy,capacity,delivered\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.3},{:.6},{},{},{}",
                r.workers, r.queue_ratio, r.epoch_seconds, r.samples_per_sec, r.mean_wait, r.max_occupancy, r.capacity, r.delivered
            );
        }
        s
    }

    /// One `x y` series per queue ratio: workers against samples/s.
    pub fn plot_data(&self) -> String {
        let mut ratios: Vec<usize> = self.rows.iter().map(|r| r.queue_ratio).collect();
        ratios.sort_unstable();
        ratios.dedup();
        let mut s = String::new();
        for q in ratios {
            let _ = writeln!(s, "# queue_ratio {q}: workers samples_per_sec");
            for r in self.rows.iter().filter(|r| r.queue_ratio == q) {
                let _ = writeln!(s, "{} {:.3}", r.workers, r.samples_per_sec);
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sweep with a no-op consumer.
pub fn sweep<S: SampleSource>(view: &[ViewSample], source: Arc<S>, cfg: &SweepConfig) -> Result<SweepResult, BenchError> {
    sweep_with(view, source, cfg, &mut |_| Ok(()))
}

/// Runs every `(workers, queue_ratio)` cell in turn; `consume` is called on each batch
/// (for example a model step).
pub fn sweep_with<S: SampleSource>(
    view: &[ViewSample],
    source: Arc<S>,
    cfg: &SweepConfig,
    consume: &mut dyn FnMut(&Batch<f32>) -> Result<(), BenchError>,
) -> Result<SweepResult, BenchError> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(LoaderError::EmptyView.into());
    }
    let delayed = Arc::new(Delayed { inner: source, delay: cfg.decode_delay });
    let mut rows = Vec::new();
    for &workers in &cfg.workers {
        for &queue_ratio in &cfg.queue_ratios {
            let lcfg = LoaderConfig {
                batch_size: cfg.batch_size,
                workers,
                queue_ratio,
                shuffle: true,
                shuffle_seed: cfg.seed,
                augment: None,
            };
            let mut loader = Loader::new(view.to_vec(), delayed.clone(), lcfg)?;
            let mut secs = Vec::new();
            let mut rates = Vec::new();
            let mut waits = Vec::new();
            let mut delivered = 0;
            let mut max_occupancy = 0;
            for epoch in 0..=cfg.epochs_per_cell as u64 {
                let mut count = 0;
                for batch in loader.epoch::<f32>(epoch) {
                    let batch = batch?;
                    count += batch.sample_ids.len();
                    consume(&batch)?;
                }
                let st = loader.epoch_stats().expect("completed epoch has stats");
                max_occupancy = max_occupancy.max(st.max_occupancy);
                if epoch == 0 {
                    continue;
                }
                delivered += count;
                secs.push(st.seconds);
                rates.push(st.samples_per_sec);
                waits.push(st.mean_wait_per_batch);
            }
            let expected = view.len() * cfg.epochs_per_cell;
            if delivered != expected {
                return Err(BenchError::Delivery { workers, queue_ratio, delivered, expected });
            }
            let row = SweepRow {
                workers,
                queue_ratio,
                epoch_seconds: median(&mut secs),
                samples_per_sec: median(&mut rates),
                mean_wait: median(&mut waits),
                max_occupancy,
                capacity: cfg.batch_size * queue_ratio,
                delivered,
            };
            log::info!("sweep cell workers={workers} queue_ratio={queue_ratio}: {:.4}s/epoch", row.epoch_seconds);
            rows.push(row);
        }
    }
    Ok(SweepResult { rows })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TimingReport {
    pub config: String,
    pub batch_size: usize,
    pub workers: usize,
    pub samples: usize,
    pub train_seconds_per_epoch: Option<f64>,
    /// Training plus a validation pass.
    pub train_val_seconds_per_epoch: Option<f64>,
    pub inference_seconds_per_image: Option<f64>,
}

impl TimingReport {
    pub fn csv_header() -> &'static str {
        "config,batch_size,workers,samples,train_s_per_epoch,train_val_s_per_epoch,inference_s_per_image"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.config,
            self.batch_size,
            self.workers,
            self.samples,
            f(self.train_seconds_per_epoch),
            f(self.train_val_seconds_per_epoch),
            f(self.inference_seconds_per_image)
        )
    }
}

/// Mean wall-clock per training epoch over `epochs`, with and without a validation pass.
pub fn time_training<S: SampleSource, T: Real>(
    model: &mut Model<T>,
    train: &mut Loader<S>,
    mut val: Option<&mut Loader<S>>,
    cfg: &TrainConfig,
    epochs: u64,
) -> Result<TimingReport, BenchError> {
    let epochs = epochs.max(1);
    let (mut train_total, mut full_total) = (0.0, 0.0);
    for epoch in 0..epochs {
        let t0 = Instant::now();
        train_epoch(model, train, &cfg.adam, cfg.dice_smooth, epoch)?;
        train_total += t0.elapsed().as_secs_f64();
        if let Some(v) = val.as_deref_mut() {
            mean_loss(model, v, epoch, cfg.dice_smooth)?;
        }
        full_total += t0.elapsed().as_secs_f64();
    }
    let lc = train.config();
    Ok(TimingReport {
        config: format!("levels={} base={}", model.config().levels, model.config().base_channels),
        batch_size: lc.batch_size,
        workers: lc.workers,
        samples: train.len(),
        train_seconds_per_epoch: Some(train_total / epochs as f64),
        train_val_seconds_per_epoch: val.map(|_| full_total / epochs as f64),
        inference_seconds_per_image: None,
    })
}

/// Mean forward time per image when `images` (each `(1, C, H, W)`) are fed in batches
/// of `batch_size`, over `repetitions` passes.
pub fn time_inference<T: Real>(
    model: &Model<T>,
    images: &[Tensor<T>],
    batch_size: usize,
    repetitions: usize,
) -> Result<TimingReport, BenchError> {
    if images.is_empty() || batch_size == 0 {
        return Err(BenchError::InvalidGrid("inference timing needs images and batch_size >= 1".into()));
    }
    let batches: Vec<Tensor<T>> = images.chunks(batch_size).map(stack).collect();
    let reps = repetitions.max(1);
    let t0 = Instant::now();
    for _ in 0..reps {
        for b in &batches {
            model.forward(b)?;
        }
    }
    let per_image = t0.elapsed().as_secs_f64().max(1e-12) / (reps * images.len()) as f64;
    Ok(TimingReport {
        config: format!("levels={} base={}", model.config().levels, model.config().base_channels),
        batch_size,
        workers: 1,
        samples: images.len(),
        train_seconds_per_epoch: None,
        train_val_seconds_per_epoch: None,
        inference_seconds_per_image: Some(per_image),
    })
}

fn stack<T: Real>(items: &[Tensor<T>]) -> Tensor<T> {
    let s = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * s.len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(items.len(), s.c, s.h, s.w), data).expect("stacked items share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::BinaryMask;
    use crate::ingest::NormImage;
    use crate::loader::MemorySource;

    fn source(n: usize) -> Arc<MemorySource> {
        Arc::new(MemorySource::new(
            (0..n).map(|_| (NormImage { rows: 4, cols: 4, values: vec![0.5; 16] }, BinaryMask::zeros(4, 4))).collect(),
        ))
    }

    #[test]
    fn grid_cardinality_and_best() {
        let src = source(10);
        let cfg = SweepConfig { workers: vec![1, 2], queue_ratios: vec![4, 8], epochs_per_cell: 1, batch_size: 4, ..Default::default() };
        let r = sweep(&src.view(), src, &cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.delivered == 10 && row.max_occupancy <= row.capacity));
        let best = r.best().unwrap().epoch_seconds;
        assert!(r.rows.iter().all(|row| best <= row.epoch_seconds));
        assert_eq!(r.to_csv().lines().count(), 5);
        assert_eq!(r.plot_data().lines().filter(|l| l.starts_with('#')).count(), 2);
    }

    #[test]
    fn worker_cap_enforced() {
        let src = source(2);
        let cfg = SweepConfig { workers: vec![9], worker_cap: 8, ..Default::default() };
        assert!(matches!(sweep(&src.view(), src, &cfg), Err(BenchError::WorkerCap { requested: 9, cap: 8 })));
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
