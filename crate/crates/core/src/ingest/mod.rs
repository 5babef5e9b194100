//! CT slice ingestion: DICOM → Hounsfield units → windowed `[0, 1]` → 8-bit PNG.

pub mod dicom;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::{self, GrayImage, ImageError};

pub use dicom::{encode_dicom, parse_dicom};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("not a DICOM Part 10 file (missing DICM marker)")]
    NotDicom,
    #[error("file truncated inside {element} at byte {offset}")]
    Truncated { element: String, offset: usize },
    #[error("missing required element {0}")]
    MissingElement(String),
    #[error("unsupported transfer syntax {0} (only uncompressed explicit VR little endian is read)")]
    UnsupportedTransferSyntax(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("invalid value for {element}: {value:?}")]
    InvalidValue { element: String, value: String },
    #[error("PixelData holds {found} bytes, {expected} required")]
    PixelDataLength { expected: usize, found: usize },
    #[error("malformed DICOM: {0}")]
    Malformed(String),
    #[error("non-finite Hounsfield value at pixel {index}")]
    NonFinite { index: usize },
    #[error("window width must be positive, got {0}")]
    InvalidWindow(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("no samples found under {0}")]
    NoSamples(PathBuf),
}

/// A CT slice as stored in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    pub rows: usize,
    pub cols: usize,
    pub stored: Vec<i32>,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// (row spacing, column spacing) in mm/px.
    pub pixel_spacing: Option<(f64, f64)>,
    pub patient_id: String,
    pub series_id: String,
    pub instance_number: i64,
    /// Defaults applied while parsing.
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HuImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Hounsfield window. The default is the lung window: center −500, width 1600.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { center: -500.0, width: 1600.0 }
    }
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self, IngestError> {
        let spec = Self { center, width };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.width > 0.0 && self.width.is_finite() && self.center.is_finite()) {
            return Err(IngestError::InvalidWindow(self.width));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.center - self.width / 2.0
    }

    /// Maps one HU value onto `[0, 1]`.
    #[inline]
    pub fn apply(&self, hu: f64) -> f32 {
        ((hu - self.lower()) / self.width).clamp(0.0, 1.0) as f32
    }
}

/// Windowed slice with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl NormImage {
    /// 8-bit image scaled back to `[0, 1]`.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self { rows: img.rows, cols: img.cols, values: img.data.iter().map(|&v| v as f32 / 255.0).collect() }
    }
}

/// `hu = stored · slope + intercept`.
pub fn to_hounsfield(slice: &RawSlice) -> HuImage {
    HuImage {
        rows: slice.rows,
        cols: slice.cols,
        values: slice
            .stored
            .iter()
            .map(|&s| s as f64 * slice.rescale_slope + slice.rescale_intercept)
            .collect(),
    }
}

/// Clipped linear windowing: `clamp((hu − lo) / width, 0, 1)` with `lo = center − width/2`.
pub fn window(img: &HuImage, spec: &WindowSpec) -> Result<NormImage, IngestError> {
    spec.validate()?;
    if let Some(index) = img.values.iter().position(|v| !v.is_finite()) {
        return Err(IngestError::NonFinite { index });
    }
    Ok(NormImage { rows: img.rows, cols: img.cols, values: img.values.iter().map(|&hu| spec.apply(hu)).collect() })
}

/// `round(v · 255)`, ties away from zero.
pub fn quantize8(img: &NormImage) -> GrayImage {
    GrayImage {
        rows: img.rows,
        cols: img.cols,
        data: img.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

/// Sidecar metadata record, one JSON object per line in `slices.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    /// Image path relative to the output root.
    pub image: String,
    pub patient_id: String,
    pub series_id: String,
    pub instance_number: i64,
    pub pixel_spacing: Option<[f64; 2]>,
}

pub const SIDECAR_FILE: &str = "slices.jsonl";
pub const MASK_SUFFIX: &str = "_mask.png";

/// Per-slice ingestion outcome.
#[derive(Clone, Debug)]
pub struct IngestSummary {
    pub slices: usize,
    pub masks: usize,
    pub warnings: usize,
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io { path: dir.to_path_buf(), source })?;
    for e in entries {
        let e = e.map_err(|source| IngestError::Io { path: dir.to_path_buf(), source })?;
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, ext, out)?;
        } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    let cleaned: String = s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    if cleaned.is_empty() {
        "unknown".into()
    } else {
        cleaned
    }
}

/// Windows every `.dcm` under `in_dir` into `out_dir/<patient>/<stem>.png`, copying a
/// sibling `<stem>_mask.png` when present, and writes `out_dir/slices.jsonl`.
pub fn ingest_directory(in_dir: &Path, out_dir: &Path, spec: &WindowSpec) -> Result<IngestSummary, IngestError> {
    spec.validate()?;
    let mut files = Vec::new();
    collect_files(in_dir, "dcm", &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(IngestError::NoSamples(in_dir.to_path_buf()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let sidecar_path = out_dir.join(SIDECAR_FILE);
    let mut sidecar = fs::File::create(&sidecar_path).map_err(io(&sidecar_path))?;
    let mut summary = IngestSummary { slices: 0, masks: 0, warnings: 0 };
    for f in &files {
        let wrap = |e: IngestError| IngestError::File { path: f.clone(), source: Box::new(e) };
        let bytes = fs::read(f).map_err(io(f))?;
        let raw = parse_dicom(&bytes).map_err(wrap)?;
        summary.warnings += raw.warnings.len();
        let norm = window(&to_hounsfield(&raw), spec).map_err(wrap)?;
        let patient = if raw.patient_id.is_empty() {
            f.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            raw.patient_id.clone()
        };
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let pdir = sanitize(&patient);
        fs::create_dir_all(out_dir.join(&pdir)).map_err(io(&out_dir.join(&pdir)))?;
        let rel = format!("{pdir}/{}.png", sanitize(&stem));
        image::write_gray_png(&out_dir.join(&rel), &quantize8(&norm))?;
        let mask_src = f.with_file_name(format!("{stem}{MASK_SUFFIX}"));
        if mask_src.is_file() {
            let dst = out_dir.join(format!("{pdir}/{}{MASK_SUFFIX}", sanitize(&stem)));
            fs::copy(&mask_src, &dst).map_err(io(&dst))?;
            summary.masks += 1;
        }
        let meta = SliceMeta {
            image: rel,
            patient_id: patient,
            series_id: raw.series_id.clone(),
            instance_number: raw.instance_number,
            pixel_spacing: raw.pixel_spacing.map(|(r, c)| [r, c]),
        };
        let line = serde_json::to_string(&meta).expect("metadata serializes");
        writeln!(sidecar, "{line}").map_err(io(&sidecar_path))?;
        summary.slices += 1;
    }
    Ok(summary)
}

/// Reads `slices.jsonl`; missing file yields an empty list.
pub fn read_sidecar(root: &Path) -> Result<Vec<SliceMeta>, IngestError> {
    let path = root.join(SIDECAR_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|source| IngestError::Io { path: path.clone(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu(values: Vec<f64>) -> HuImage {
        HuImage { rows: 1, cols: values.len(), values }
    }

    fn slice(stored: Vec<i32>, slope: f64, intercept: f64) -> RawSlice {
        RawSlice {
            rows: 1,
            cols: stored.len(),
            stored,
            rescale_slope: slope,
            rescale_intercept: intercept,
            pixel_spacing: None,
            patient_id: String::new(),
            series_id: String::new(),
            instance_number: 0,
            warnings: vec![],
        }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(to_hounsfield(&slice(vec![0, 1024], 1.0, -1024.0)).values, vec![-1024.0, 0.0]);
        assert_eq!(to_hounsfield(&slice(vec![100], 2.0, -1000.0)).values, vec![-800.0]);
    }

    #[test]
    fn lung_window_examples() {
        let out = window(&hu(vec![-1300.0, -500.0, 300.0, -900.0, -5000.0, 4000.0]), &WindowSpec::default()).unwrap();
        assert_eq!(out.values, vec![0.0, 0.5, 1.0, 0.25, 0.0, 1.0]);
    }

    #[test]
    fn window_rejects_non_finite_and_bad_width() {
        let err = window(&hu(vec![0.0, f64::NAN]), &WindowSpec::default()).unwrap_err();
        assert!(matches!(err, IngestError::NonFinite { index: 1 }));
        assert!(WindowSpec::new(-500.0, 0.0).is_err());
    }

    #[test]
    fn quantize_rounds_half_away() {
        let img = NormImage { rows: 1, cols: 4, values: vec![0.0, 1.0, 0.5, 0.2] };
        assert_eq!(quantize8(&img).data, vec![0, 255, 128, 51]);
    }

    #[test]
    fn empty_input_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let err = ingest_directory(dir.path(), &out, &WindowSpec::default()).unwrap_err();
        assert!(err.to_string().contains("no samples found"));
    }
}
