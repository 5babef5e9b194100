//! Synthetic "circles" data: slices with one bright disk and its mask, for exercising
//! every pipeline stage without clinical data.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{self, BinaryMask};
use crate::ingest::{self, NormImage, RawSlice, SliceMeta, WindowSpec, MASK_SUFFIX, SIDECAR_FILE};
use crate::loader::MemorySource;
use crate::rng::keyed_rng;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirclesConfig {
    pub size: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub background: f32,
    pub foreground: f32,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for CirclesConfig {
    fn default() -> Self {
        Self { size: 64, min_radius: 12.0, max_radius: 24.0, background: 0.5, foreground: 1.0, noise: 0.0, seed: 7 }
    }
}

/// Sample `index` of the stream; samples are independent of each other.
pub fn circle_sample(cfg: &CirclesConfig, index: u64) -> (NormImage, BinaryMask) {
    let mut rng = keyed_rng(&[cfg.seed, index, 0xC1C1E]);
    let n = cfg.size;
    let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let lo = r + 1.0;
    let hi = (n as f64 - 1.0 - r - 1.0).max(lo);
    let cy = rng.random_range(lo..=hi);
    let cx = rng.random_range(lo..=hi);
    let mut values = Vec::with_capacity(n * n);
    let mut mask = BinaryMask::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = dy * dy + dx * dx <= r * r;
            let base = if inside { cfg.foreground } else { cfg.background };
            let v = base + rng.random_range(-cfg.noise..=cfg.noise);
            values.push(v.clamp(0.0, 1.0));
            mask.data[y * n + x] = u8::from(inside);
        }
    }
    (NormImage { rows: n, cols: n, values }, mask)
}

/// Slice with no disk.
pub fn blank_sample(cfg: &CirclesConfig, index: u64) -> (NormImage, BinaryMask) {
    let mut rng = keyed_rng(&[cfg.seed, index, 0xB1A4C]);
    let n = cfg.size;
    let values = (0..n * n).map(|_| (cfg.background + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0)).collect();
    (NormImage { rows: n, cols: n, values }, BinaryMask::zeros(n, n))
}

/// Samples `start..start + count` held in memory.
pub fn circles(cfg: &CirclesConfig, start: u64, count: usize) -> MemorySource {
    MemorySource::new((0..count as u64).map(|i| circle_sample(cfg, start + i)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    pub patients: usize,
    pub nodule_slices: usize,
    pub blank_slices: usize,
    /// Pixel spacing written to the sidecar, in mm.
    pub spacing: f64,
}

impl Default for SynthLayout {
    fn default() -> Self {
        Self { patients: 10, nodule_slices: 5, blank_slices: 5, spacing: 0.7 }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

/// Writes `root/<patient>/<slice>.png`, masks for nodule slices and `slices.jsonl`.
/// Returns the number of images written.
pub fn write_png_dataset(root: &Path, cfg: &CirclesConfig, layout: &SynthLayout) -> Result<usize, Error> {
    write_dataset_with(root, cfg, layout, false, &WindowSpec::default())
}

/// Same layout as [`write_png_dataset`] but slices are DICOM files storing Hounsfield
/// units that window back to the synthetic intensities.
pub fn write_dicom_dataset(root: &Path, cfg: &CirclesConfig, layout: &SynthLayout, window: &WindowSpec) -> Result<usize, Error> {
    write_dataset_with(root, cfg, layout, true, window)
}

fn write_dataset_with(root: &Path, cfg: &CirclesConfig, layout: &SynthLayout, dicom: bool, window: &WindowSpec) -> Result<usize, Error> {
    fs::create_dir_all(root).map_err(io(root))?;
    let sidecar_path = root.join(SIDECAR_FILE);
    let mut sidecar = Vec::new();
    let mut written = 0;
    let per_patient = layout.nodule_slices + layout.blank_slices;
    for p in 0..layout.patients {
        let patient = format!("P{p:04}");
        let dir = root.join(&patient);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for s in 0..per_patient {
            let index = (p * per_patient + s) as u64;
            let (img, mask) = if s < layout.nodule_slices { circle_sample(cfg, index) } else { blank_sample(cfg, index) };
            let stem = format!("slice{s:03}");
            let ext = if dicom { "dcm" } else { "png" };
            let rel = format!("{patient}/{stem}.{ext}");
            let path = root.join(&rel);
            if dicom {
                let raw = to_raw(&img, window, &patient, s as i64, layout.spacing);
                fs::write(&path, ingest::encode_dicom(&raw)).map_err(io(&path))?;
            } else {
                image::write_gray_png(&path, &ingest::quantize8(&img))?;
            }
            if mask.foreground() > 0 {
                image::write_gray_png(&dir.join(format!("{stem}{MASK_SUFFIX}")), &mask.to_gray())?;
            }
            let meta = SliceMeta {
                image: if dicom { format!("{patient}/{stem}.png") } else { rel },
                patient_id: patient.clone(),
                series_id: format!("{patient}.1"),
                instance_number: s as i64,
                pixel_spacing: Some([layout.spacing; 2]),
            };
            sidecar.push(serde_json::to_string(&meta).expect("metadata serializes"));
            written += 1;
        }
    }
    if !dicom {
        let mut f = fs::File::create(&sidecar_path).map_err(io(&sidecar_path))?;
        for line in sidecar {
            writeln!(f, "{line}").map_err(io(&sidecar_path))?;
        }
    }
    Ok(written)
}

fn to_raw(img: &NormImage, window: &WindowSpec, patient: &str, instance: i64, spacing: f64) -> RawSlice {
    let intercept = -1024.0;
    let stored = img
        .values
        .iter()
        .map(|&v| (window.lower() + v as f64 * window.width - intercept).round() as i32)
        .collect();
    RawSlice {
        rows: img.rows,
        cols: img.cols,
        stored,
        rescale_slope: 1.0,
        rescale_intercept: intercept,
        pixel_spacing: Some((spacing, spacing)),
        patient_id: patient.to_string(),
        series_id: format!("{patient}.1"),
        instance_number: instance,
        warnings: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_and_nonempty() {
        let cfg = CirclesConfig::default();
        let (a, ma) = circle_sample(&cfg, 3);
        let (b, mb) = circle_sample(&cfg, 3);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma.foreground() > 100);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(circle_sample(&cfg, 4).1, ma);
        assert_eq!(blank_sample(&cfg, 0).1.foreground(), 0);
    }

    #[test]
    fn png_dataset_builds_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let layout = SynthLayout { patients: 3, nodule_slices: 2, blank_slices: 1, spacing: 0.7 };
        let n = write_png_dataset(dir.path(), &CirclesConfig { size: 16, min_radius: 2.0, max_radius: 4.0, ..Default::default() }, &layout).unwrap();
        assert_eq!(n, 9);
        let m = crate::dataset::build_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.samples.iter().filter(|s| s.has_nodule).count(), 6);
        assert!(m.samples.iter().all(|s| s.pixel_spacing == Some([0.7, 0.7])));
    }
}
