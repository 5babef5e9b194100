//! Multi-worker prefetching loader.
//!
//! Per epoch the view is shuffled by `(shuffle_seed, epoch)` and cut into batches.
//! `workers` producer threads claim positions in that order, decode/window/augment the
//! sample and park it in a bounded buffer of `queue_ratio × batch_size` slots. A slot is
//! taken before decoding starts and released when the consumer removes the sample, so
//! producers block when the buffer is full. The consumer reassembles batches in the
//! shuffled order, which makes batch contents independent of worker timing.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, AugmentPolicy};
use crate::dataset::{MaskSource, ViewSample};
use crate::image::{self, BinaryMask, ImageError};
use crate::ingest::{self, IngestError, NormImage, WindowSpec};
use crate::rng::keyed_rng;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum LoaderError {
    #[error("invalid loader config: {0}")]
    InvalidConfig(String),
    #[error("empty sample view")]
    EmptyView,
    #[error("sample {id} ({path}): {message}")]
    Sample { id: usize, path: PathBuf, message: String },
    #[error("sample {id}: image is {rows}x{cols}, batch expects {expect_rows}x{expect_cols}")]
    SizeMismatch { id: usize, rows: usize, cols: usize, expect_rows: usize, expect_cols: usize },
    #[error("loader worker panicked")]
    WorkerPanic,
}

impl LoaderError {
    fn sample(s: &ViewSample, message: impl ToString) -> Self {
        Self::Sample { id: s.id, path: s.image.clone(), message: message.to_string() }
    }
}

/// Produces the windowed image and binary mask for one view entry.
pub trait SampleSource: Send + Sync + 'static {
    fn load(&self, sample: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError>;
}

/// Reads `.png` slices (already windowed) or `.dcm` slices (windowed on the fly),
/// plus PNG masks.
#[derive(Clone, Debug, Default)]
pub struct FileSource {
    pub window: WindowSpec,
}

impl FileSource {
    fn read_image(&self, s: &ViewSample) -> Result<NormImage, LoaderError> {
        let is_dicom = s.image.extension().is_some_and(|e| e.eq_ignore_ascii_case("dcm"));
        if is_dicom {
            let bytes = fs::read(&s.image).map_err(|e| LoaderError::sample(s, e))?;
            let raw = ingest::parse_dicom(&bytes).map_err(|e: IngestError| LoaderError::sample(s, e))?;
            ingest::window(&ingest::to_hounsfield(&raw), &self.window).map_err(|e| LoaderError::sample(s, e))
        } else {
            let g = image::read_gray_png(&s.image).map_err(|e: ImageError| LoaderError::sample(s, e))?;
            Ok(NormImage::from_gray(&g))
        }
    }
}

impl SampleSource for FileSource {
    fn load(&self, s: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError> {
        let img = self.read_image(s)?;
        let mask = match &s.mask {
            MaskSource::File(p) => image::read_mask_png(p).map_err(|e| LoaderError::sample(s, e))?,
            MaskSource::Empty => BinaryMask::zeros(img.rows, img.cols),
        };
        Ok((img, mask))
    }
}

/// In-memory samples addressed by `ViewSample::id`.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub samples: Vec<(NormImage, BinaryMask)>,
}

impl MemorySource {
    pub fn new(samples: Vec<(NormImage, BinaryMask)>) -> Self {
        Self { samples }
    }

    /// One view entry per stored sample, ids `0..len`.
    pub fn view(&self) -> Vec<ViewSample> {
        (0..self.samples.len()).map(|id| ViewSample { id, image: PathBuf::from(format!("mem:{id}")), mask: MaskSource::Empty }).collect()
    }
}

impl SampleSource for MemorySource {
    fn load(&self, s: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError> {
        self.samples.get(s.id).cloned().ok_or_else(|| LoaderError::sample(s, "no such in-memory sample"))
    }
}

/// Adds a fixed latency to every load, to emulate slow storage in benchmarks.
#[derive(Clone, Debug)]
pub struct Delayed<S> {
    pub inner: S,
    pub delay: Duration,
}

impl<S: SampleSource> SampleSource for Delayed<S> {
    fn load(&self, s: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError> {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        self.inner.load(s)
    }
}

impl<S: SampleSource + ?Sized> SampleSource for Arc<S> {
    fn load(&self, s: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError> {
        (**self).load(s)
    }
}

impl SampleSource for Box<dyn SampleSource> {
    fn load(&self, s: &ViewSample) -> Result<(NormImage, BinaryMask), LoaderError> {
        (**self).load(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub workers: usize,
    /// Buffer capacity in samples is `queue_ratio × batch_size`.
    pub queue_ratio: usize,
    pub shuffle: bool,
    pub shuffle_seed: u64,
    pub augment: Option<AugmentPolicy>,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self { batch_size: 12, workers: 2, queue_ratio: 8, shuffle: true, shuffle_seed: 0, augment: None }
    }
}

impl LoaderConfig {
    pub fn capacity(&self) -> usize {
        self.queue_ratio * self.batch_size
    }

    pub fn validate(&self) -> Result<(), LoaderError> {
        if self.batch_size == 0 {
            return Err(LoaderError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(LoaderError::InvalidConfig("workers must be >= 1".into()));
        }
        if self.queue_ratio == 0 {
            return Err(LoaderError::InvalidConfig("queue_ratio must be >= 1".into()));
        }
        if let Some(p) = &self.augment {
            p.validate().map_err(|e: AugmentError| LoaderError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Same loader without shuffling or augmentation, for evaluation.
    pub fn for_eval(&self) -> Self {
        Self { shuffle: false, augment: None, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real = f32> {
    /// `(N, 1, H, W)` windowed intensities.
    pub images: Tensor<T>,
    /// `(N, 1, H, W)` with values exactly 0 or 1.
    pub masks: Tensor<T>,
    pub sample_ids: Vec<usize>,
}

/// Throughput figures for one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub samples: usize,
    pub batches: usize,
    pub seconds: f64,
    pub samples_per_sec: f64,
    /// Mean time the consumer blocked per batch.
    pub mean_wait_per_batch: f64,
    /// Mean number of decoded samples waiting, observed at each take.
    pub mean_queue_occupancy: f64,
    /// Largest number of slots held at once (decoding or waiting).
    pub max_occupancy: usize,
    pub capacity: usize,
    /// Fraction of the epoch each worker spent producing samples.
    pub worker_busy: Vec<f64>,
}

struct State {
    next_claim: usize,
    in_flight: usize,
    max_in_flight: usize,
    ready: BTreeMap<usize, Result<(NormImage, BinaryMask), LoaderError>>,
    cancelled: bool,
}

struct Shared {
    state: Mutex<State>,
    ready_cv: Condvar,
    space_cv: Condvar,
}

pub struct Loader<S: SampleSource> {
    view: Arc<Vec<ViewSample>>,
    source: Arc<S>,
    cfg: LoaderConfig,
    history: Vec<EpochStats>,
}

impl<S: SampleSource> Loader<S> {
    pub fn new(view: Vec<ViewSample>, source: Arc<S>, cfg: LoaderConfig) -> Result<Self, LoaderError> {
        cfg.validate()?;
        if view.is_empty() {
            return Err(LoaderError::EmptyView);
        }
        Ok(Self { view: Arc::new(view), source, cfg, history: Vec::new() })
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.cfg
    }

    pub fn view(&self) -> &[ViewSample] {
        &self.view
    }

    pub fn len(&self) -> usize {
        self.view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.view.len().div_ceil(self.cfg.batch_size)
    }

    /// View positions in delivery order for `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.view.len()).collect();
        if self.cfg.shuffle {
            order.shuffle(&mut keyed_rng(&[self.cfg.shuffle_seed, epoch, 0x0005_4A7F]));
        }
        order
    }

    /// Sample ids per batch for `epoch`; the last batch may be partial.
    pub fn batch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&p| self.view[p].id).collect())
            .collect()
    }

    /// Stats of the most recently completed epoch.
    pub fn epoch_stats(&self) -> Option<&EpochStats> {
        self.history.last()
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Starts the workers for `epoch` and returns the batch iterator.
    pub fn epoch<T: Real>(&mut self, epoch: u64) -> Epoch<'_, S, T> {
        let order = Arc::new(self.epoch_order(epoch));
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                next_claim: 0,
                in_flight: 0,
                max_in_flight: 0,
                ready: BTreeMap::new(),
                cancelled: false,
            }),
            ready_cv: Condvar::new(),
            space_cv: Condvar::new(),
        });
        let capacity = self.cfg.capacity();
        let started = Instant::now();
        let workers = (0..self.cfg.workers)
            .map(|_| {
                let (shared, order, view, source) =
                    (shared.clone(), order.clone(), self.view.clone(), self.source.clone());
                let policy = self.cfg.augment.clone();
                let seed = self.cfg.shuffle_seed;
                thread::spawn(move || {
                    let mut busy = Duration::ZERO;
                    loop {
                        let pos = {
                            let mut st = shared.state.lock().expect("loader lock");
                            while st.in_flight >= capacity && !st.cancelled {
                                st = shared.space_cv.wait(st).expect("loader lock");
                            }
                            if st.cancelled || st.next_claim >= order.len() {
                                break;
                            }
                            let p = st.next_claim;
                            st.next_claim += 1;
                            st.in_flight += 1;
                            st.max_in_flight = st.max_in_flight.max(st.in_flight);
                            p
                        };
                        let t0 = Instant::now();
                        let sample = &view[order[pos]];
                        let result = prepare(source.as_ref(), sample, policy.as_ref(), seed, epoch);
                        busy += t0.elapsed();
                        let mut st = shared.state.lock().expect("loader lock");
                        st.ready.insert(pos, result);
                        shared.ready_cv.notify_all();
                    }
                    busy
                })
            })
            .collect();
        Epoch {
            loader: self,
            epoch,
            order,
            shared,
            workers,
            started,
            next_pos: 0,
            batches: 0,
            wait: Duration::ZERO,
            occupancy_sum: 0,
            takes: 0,
            failed: false,
            _elem: std::marker::PhantomData,
        }
    }
}

fn prepare<S: SampleSource + ?Sized>(
    source: &S,
    sample: &ViewSample,
    policy: Option<&AugmentPolicy>,
    seed: u64,
    epoch: u64,
) -> Result<(NormImage, BinaryMask), LoaderError> {
    let (img, mask) = source.load(sample)?;
    match policy {
        Some(p) => {
            let mut rng = keyed_rng(&[seed, epoch, sample.id as u64]);
            let (i, m, _) = crate::augment::augment_pair(&img, &mask, &mut rng, p).map_err(|e| LoaderError::sample(sample, e))?;
            Ok((i, m))
        }
        None => {
            if img.rows != mask.rows || img.cols != mask.cols {
                return Err(LoaderError::sample(sample, "mask dimensions differ from image"));
            }
            Ok((img, mask))
        }
    }
}

/// Batch iterator for one epoch. Dropping it stops and joins the workers.
pub struct Epoch<'a, S: SampleSource, T: Real> {
    loader: &'a mut Loader<S>,
    epoch: u64,
    order: Arc<Vec<usize>>,
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<Duration>>,
    started: Instant,
    next_pos: usize,
    batches: usize,
    wait: Duration,
    occupancy_sum: usize,
    takes: usize,
    failed: bool,
    _elem: std::marker::PhantomData<T>,
}

impl<S: SampleSource, T: Real> Epoch<'_, S, T> {
    fn take(&mut self, pos: usize) -> Result<(NormImage, BinaryMask), LoaderError> {
        let t0 = Instant::now();
        let mut st = self.shared.state.lock().expect("loader lock");
        while !st.ready.contains_key(&pos) {
            st = self.shared.ready_cv.wait(st).expect("loader lock");
        }
        self.wait += t0.elapsed();
        self.occupancy_sum += st.ready.len();
        self.takes += 1;
        let item = st.ready.remove(&pos).expect("present");
        st.in_flight -= 1;
        self.shared.space_cv.notify_all();
        item
    }

    /// Next batch, or `None` at end of epoch.
    pub fn next_batch(&mut self) -> Option<Result<Batch<T>, LoaderError>> {
        if self.failed || self.next_pos >= self.order.len() {
            return None;
        }
        let end = (self.next_pos + self.loader.cfg.batch_size).min(self.order.len());
        let mut parts = Vec::with_capacity(end - self.next_pos);
        for pos in self.next_pos..end {
            match self.take(pos) {
                Ok(p) => parts.push((self.loader.view[self.order[pos]].id, p)),
                Err(e) => return Some(Err(self.fail(e))),
            }
        }
        self.next_pos = end;
        let batch = assemble(parts);
        if batch.is_err() {
            self.failed = true;
            self.stop();
        }
        self.batches += 1;
        Some(batch)
    }

    fn fail(&mut self, e: LoaderError) -> LoaderError {
        self.failed = true;
        self.stop();
        e
    }

    fn stop(&mut self) {
        {
            let mut st = self.shared.state.lock().expect("loader lock");
            st.cancelled = true;
        }
        self.shared.space_cv.notify_all();
    }

    fn join(&mut self) -> Vec<Duration> {
        self.workers.drain(..).map(|h| h.join().unwrap_or_default()).collect()
    }
}

impl<S: SampleSource, T: Real> Iterator for Epoch<'_, S, T> {
    type Item = Result<Batch<T>, LoaderError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

impl<S: SampleSource, T: Real> Drop for Epoch<'_, S, T> {
    fn drop(&mut self) {
        let complete = !self.failed && self.next_pos >= self.order.len();
        self.stop();
        let busy = self.join();
        if !complete {
            return;
        }
        let seconds = self.started.elapsed().as_secs_f64().max(1e-9);
        let samples = self.order.len();
        let max_occupancy = self.shared.state.lock().map(|s| s.max_in_flight).unwrap_or(0);
        self.loader.history.push(EpochStats {
            epoch: self.epoch,
            samples,
            batches: self.batches,
            seconds,
            samples_per_sec: samples as f64 / seconds,
            mean_wait_per_batch: self.wait.as_secs_f64() / self.batches.max(1) as f64,
            mean_queue_occupancy: self.occupancy_sum as f64 / self.takes.max(1) as f64,
            max_occupancy,
            capacity: self.loader.cfg.capacity(),
            worker_busy: busy.iter().map(|d| (d.as_secs_f64() / seconds).min(1.0)).collect(),
        });
    }
}

fn assemble<T: Real>(parts: Vec<(usize, (NormImage, BinaryMask))>) -> Result<Batch<T>, LoaderError> {
    let (rows, cols) = {
        let first = &parts[0].1 .0;
        (first.rows, first.cols)
    };
    let shape = Shape::new(parts.len(), 1, rows, cols);
    let mut images = Vec::with_capacity(shape.len());
    let mut masks = Vec::with_capacity(shape.len());
    let mut ids = Vec::with_capacity(parts.len());
    for (id, (img, mask)) in parts {
        if img.rows != rows || img.cols != cols {
            return Err(LoaderError::SizeMismatch { id, rows: img.rows, cols: img.cols, expect_rows: rows, expect_cols: cols });
        }
        images.extend(img.values.iter().map(|&v| T::lit(v as f64)));
        masks.extend(mask.data.iter().map(|&m| if m != 0 { T::one() } else { T::zero() }));
        ids.push(id);
    }
    Ok(Batch {
        images: Tensor::from_vec(shape, images).expect("batch shape"),
        masks: Tensor::from_vec(shape, masks).expect("batch shape"),
        sample_ids: ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize) -> Arc<MemorySource> {
        let samples = (0..n)
            .map(|i| {
                let img = NormImage { rows: 2, cols: 2, values: vec![i as f32 / n as f32; 4] };
                let mut m = BinaryMask::zeros(2, 2);
                m.data[i % 4] = 1;
                (img, m)
            })
            .collect();
        Arc::new(MemorySource::new(samples))
    }

    #[test]
    fn partial_last_batch_is_kept() {
        let src = source(25);
        let mut l = Loader::new(src.view(), src, LoaderConfig { batch_size: 12, ..Default::default() }).unwrap();
        let sizes: Vec<usize> = l.epoch::<f32>(0).map(|b| b.unwrap().sample_ids.len()).collect();
        assert_eq!(sizes, vec![12, 12, 1]);
        let st = l.epoch_stats().unwrap();
        assert_eq!((st.samples, st.batches), (25, 3));
    }

    #[test]
    fn config_validation() {
        let src = source(2);
        for cfg in [
            LoaderConfig { batch_size: 0, ..Default::default() },
            LoaderConfig { workers: 0, ..Default::default() },
            LoaderConfig { queue_ratio: 0, ..Default::default() },
        ] {
            assert!(Loader::new(src.view(), src.clone(), cfg).is_err());
        }
        assert!(matches!(Loader::new(vec![], src, LoaderConfig::default()), Err(LoaderError::EmptyView)));
    }

    #[test]
    fn failing_sample_aborts_epoch() {
        let src = source(5);
        let mut view = src.view();
        view[3].id = 99;
        let cfg = LoaderConfig { batch_size: 2, shuffle: false, ..Default::default() };
        let mut l = Loader::new(view, src, cfg).unwrap();
        let results: Vec<_> = l.epoch::<f32>(0).collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        assert!(matches!(&results[1], Err(LoaderError::Sample { id: 99, .. })));
        assert!(l.epoch_stats().is_none());
    }

    #[test]
    fn early_drop_joins_workers() {
        let src = source(40);
        let mut l = Loader::new(src.view(), src, LoaderConfig { batch_size: 4, workers: 3, queue_ratio: 1, ..Default::default() }).unwrap();
        {
            let mut e = l.epoch::<f32>(0);
            assert!(e.next_batch().unwrap().is_ok());
        }
        assert!(l.epoch_stats().is_none());
        assert_eq!(l.epoch::<f32>(1).count(), 10);
    }
}
