//! Thresholding, Dice/IoU scoring, split evaluation and overlay rendering.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::dataset::ViewSample;
use crate::image::{BinaryMask, GrayImage, RgbImage};
use crate::loader::{Batch, Loader, LoaderConfig, LoaderError, SampleSource};
use crate::tensor::{Real, Tensor};
use crate::unet::{Model, ModelError};

/// Published full-scale test-set means, kept for the report header.
pub const REFERENCE_DICE: f64 = 0.75;
pub const REFERENCE_IOU: f64 = 0.73;

pub const TRUE_POSITIVE: [u8; 3] = [255, 255, 0];
pub const FALSE_NEGATIVE: [u8; 3] = [255, 0, 0];
pub const FALSE_POSITIVE: [u8; 3] = [0, 255, 0];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty evaluation view")]
    EmptyView,
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One mask per batch item: 1 where `p >= threshold`. Expects a single channel.
pub fn binarize<T: Real>(probs: &Tensor<T>, threshold: f64) -> Result<Vec<BinaryMask>, MetricsError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::Threshold(threshold));
    }
    let s = probs.shape();
    if s.c != 1 {
        return Err(MetricsError::Shape(format!("expected one channel, got {s}")));
    }
    let t = T::lit(threshold);
    Ok((0..s.n)
        .map(|i| BinaryMask { rows: s.h, cols: s.w, data: probs.item(i).iter().map(|&p| u8::from(p >= t)).collect() })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if (a.rows, a.cols) != (b.rows, b.cols) || a.data.len() != b.data.len() {
        return Err(MetricsError::Shape(format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self, MetricsError> {
        check_dims(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, or 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `tp / (tp + fp + fn)`, or 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.dice())
}

pub fn iou_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.iou())
}

/// Anything that maps a batch to `(N, 1, H, W)` foreground probabilities.
pub trait Segmenter {
    fn predict(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, MetricsError>;
}

impl Segmenter for Model<f32> {
    fn predict(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, MetricsError> {
        Ok(self.forward(&batch.images)?)
    }
}

/// Returns the ground truth as its prediction; the upper bound of any model.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn predict(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, MetricsError> {
        Ok(batch.masks.clone())
    }
}

/// Predicts background everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmptySegmenter;

impl Segmenter for EmptySegmenter {
    fn predict(&self, batch: &Batch<f32>) -> Result<Tensor<f32>, MetricsError> {
        Ok(Tensor::zeros(batch.masks.shape()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub sample_id: usize,
    pub has_nodule: bool,
    pub dice: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub images: Vec<ImageScore>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub with_nodule: usize,
    pub without_nodule: usize,
}

impl MetricsReport {
    pub fn from_scores(threshold: f64, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_dice = images.iter().map(|s| s.dice).sum::<f64>() / n;
        let mean_iou = images.iter().map(|s| s.iou).sum::<f64>() / n;
        let with_nodule = images.iter().filter(|s| s.has_nodule).count();
        let without_nodule = images.len() - with_nodule;
        Self { threshold, images, mean_dice, mean_iou, with_nodule, without_nodule }
    }

    /// Per-image table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,has_nodule,dice,iou,tp,fp,fn,tn\n");
        for r in &self.images {
            let c = r.counts;
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.sample_id, u8::from(r.has_nodule), r.dice, r.iou, c.tp, c.fp, c.fn_, c.tn);
        }
        s
    }

    /// Summary block; the reference line holds the published full-scale figures and is
    /// context, not a target.
    pub fn summary(&self) -> String {
        format!(
            "reference_dice = {REFERENCE_DICE}\nreference_iou = {REFERENCE_IOU}\nthreshold = {}\nimages = {}\nwith_nodule = {}\nwithout_nodule = {}\nmean_dice = {:.6}\nmean_iou = {:.6}\n",
            self.threshold,
            self.images.len(),
            self.with_nodule,
            self.without_nodule,
            self.mean_dice,
            self.mean_iou
        )
    }
}

/// Scores every sample of `view` at `threshold`, including those with empty ground truth.
pub fn evaluate<S: SampleSource, M: Segmenter + ?Sized>(
    model: &M,
    view: Vec<ViewSample>,
    source: Arc<S>,
    loader_cfg: &LoaderConfig,
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    if view.is_empty() {
        return Err(MetricsError::EmptyView);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::Threshold(threshold));
    }
    let mut loader = Loader::new(view, source, loader_cfg.for_eval())?;
    let mut scores = Vec::with_capacity(loader.len());
    for batch in loader.epoch::<f32>(0) {
        let batch = batch?;
        let probs = model.predict(&batch)?;
        if probs.shape() != batch.masks.shape() {
            return Err(MetricsError::Shape(format!("prediction {} vs masks {}", probs.shape(), batch.masks.shape())));
        }
        let preds = binarize(&probs, threshold)?;
        let gts = binarize(&batch.masks, 0.5)?;
        for ((id, p), g) in batch.sample_ids.iter().zip(&preds).zip(&gts) {
            let counts = ConfusionCounts::from_masks(p, g)?;
            scores.push(ImageScore { sample_id: *id, has_nodule: g.foreground() > 0, dice: counts.dice(), iou: counts.iou(), counts });
        }
    }
    Ok(MetricsReport::from_scores(threshold, scores))
}

/// Colors TP yellow, FN red, FP green and leaves TN pixels at the base gray value.
pub fn overlay(pred: &BinaryMask, gt: &BinaryMask, base: &GrayImage) -> Result<RgbImage, MetricsError> {
    check_dims(pred, gt)?;
    if (base.rows, base.cols) != (gt.rows, gt.cols) {
        return Err(MetricsError::Shape(format!("base {}x{} vs mask {}x{}", base.rows, base.cols, gt.rows, gt.cols)));
    }
    let mut data = Vec::with_capacity(3 * base.data.len());
    for ((&p, &g), &v) in pred.data.iter().zip(&gt.data).zip(&base.data) {
        let px = match (p != 0, g != 0) {
            (true, true) => TRUE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (true, false) => FALSE_POSITIVE,
            (false, false) => [v, v, v],
        };
        data.extend_from_slice(&px);
    }
    Ok(RgbImage { rows: base.rows, cols: base.cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(bits: &[u8], cols: usize) -> BinaryMask {
        BinaryMask { rows: bits.len() / cols, cols, data: bits.to_vec() }
    }

    #[test]
    fn binarize_boundary_and_range() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5f32, 0.49, 1.0]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap()[0].data, vec![1, 0, 1]);
        assert!(matches!(binarize(&p, 1.5), Err(MetricsError::Threshold(_))));
        let z = Tensor::<f32>::zeros(Shape::new(2, 1, 2, 2));
        assert!(binarize(&z, 0.5).unwrap().iter().all(|m| m.foreground() == 0));
    }

    #[test]
    fn score_examples() {
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let g = mask(&[0, 0, 1, 1, 1, 1, 0, 0], 4);
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
        assert_eq!(iou_score(&p, &g).unwrap(), 1.0 / 3.0);
        assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
        let e = mask(&[0; 8], 4);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(iou_score(&e, &e).unwrap(), 1.0);
        let d = mask(&[0, 0, 0, 0, 1, 1, 1, 1], 4);
        assert_eq!(dice_score(&p, &d).unwrap(), 0.0);
        assert!(dice_score(&p, &mask(&[0; 6], 3)).is_err());
    }

    #[test]
    fn overlay_colors() {
        let p = mask(&[1, 1, 0, 0], 2);
        let g = mask(&[1, 0, 1, 0], 2);
        let base = GrayImage::new(2, 2, vec![10, 20, 30, 40]).unwrap();
        let o = overlay(&p, &g, &base).unwrap();
        assert_eq!(o.pixel(0), TRUE_POSITIVE);
        assert_eq!(o.pixel(1), FALSE_POSITIVE);
        assert_eq!(o.pixel(2), FALSE_NEGATIVE);
        assert_eq!(o.pixel(3), [40, 40, 40]);
    }

    #[test]
    fn report_means_and_counts() {
        let mk = |id, has, dice| ImageScore { sample_id: id, has_nodule: has, dice, iou: dice, counts: ConfusionCounts::default() };
        let r = MetricsReport::from_scores(0.5, vec![mk(0, true, 0.5), mk(1, false, 1.0)]);
        assert_eq!(r.mean_dice, 0.75);
        assert_eq!((r.with_nodule, r.without_nodule), (1, 1));
        assert!(r.summary().starts_with("reference_dice = 0.75\nreference_iou = 0.73\n"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
