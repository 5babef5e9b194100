use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::image;
use crate::ingest::{self, MASK_SUFFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Training, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "training" | "train" => Ok(Split::Training),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(DatasetError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Relative to the manifest root, `/`-separated.
    pub image_path: String,
    pub mask_path: Option<String>,
    pub patient_id: String,
    pub has_nodule: bool,
    pub split: Split,
    pub pixel_spacing: Option<[f64; 2]>,
}

/// Optional demographic metadata. Carried through serialization, never used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub root: PathBuf,
    pub samples: Vec<SampleRecord>,
    /// patient id → sample indices, ascending.
    pub patients: BTreeMap<String, Vec<usize>>,
    pub patient_info: BTreeMap<String, PatientInfo>,
}

fn rel_string(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: dir.to_path_buf(), source };
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Scans `root/<patient>/…` for `.png`/`.dcm` images and their `<stem>_mask.png` masks.
pub fn build_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let mut files = Vec::new();
    if root.is_dir() {
        walk(root, &mut files)?;
    } else {
        return Err(DatasetError::NoSamples(root.to_path_buf()));
    }
    let mut images = BTreeSet::new();
    let mut masks = BTreeSet::new();
    for f in files {
        if f.parent() == Some(root) {
            continue; // top-level files are metadata, not slices
        }
        let rel = rel_string(root, &f);
        if rel.ends_with(MASK_SUFFIX) {
            masks.insert(rel);
        } else if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("dcm")) {
            images.insert(rel);
        }
    }
    if images.is_empty() {
        return Err(DatasetError::NoSamples(root.to_path_buf()));
    }
    let spacing: BTreeMap<String, [f64; 2]> = ingest::read_sidecar(root)
        .map_err(|e| DatasetError::Invalid(e.to_string()))?
        .into_iter()
        .filter_map(|m| m.pixel_spacing.map(|s| (m.image, s)))
        .collect();

    let stem_of = |rel: &str| rel.rsplit_once('.').map_or(rel.to_string(), |(s, _)| s.to_string());
    let image_stems: BTreeSet<String> = images.iter().map(|i| stem_of(i)).collect();
    for m in &masks {
        let stem = m.trim_end_matches(MASK_SUFFIX);
        if !image_stems.contains(stem) {
            return Err(DatasetError::OrphanMask(root.join(m)));
        }
    }

    let mut samples = Vec::with_capacity(images.len());
    for rel in images {
        let mask_rel = format!("{}{MASK_SUFFIX}", stem_of(&rel));
        let mask_path = masks.contains(&mask_rel).then_some(mask_rel);
        let has_nodule = match &mask_path {
            Some(m) => image::read_mask_png(&root.join(m))?.foreground() > 0,
            None => false,
        };
        let patient_id = rel.split('/').next().unwrap_or_default().to_string();
        samples.push(SampleRecord {
            pixel_spacing: spacing.get(&rel).copied(),
            image_path: rel,
            mask_path,
            patient_id,
            has_nodule,
            split: Split::Unassigned,
        });
    }
    let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    Manifest::from_samples(name, root.to_path_buf(), samples)
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    location: String,
    label: Option<String>,
    patient: String,
    has_nodule: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixel_spacing: Option<[f64; 2]>,
}

#[derive(Serialize, Deserialize, Default)]
struct SplitIndices {
    training: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    root: PathBuf,
    images: Vec<ImageEntry>,
    split: SplitIndices,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    patients: BTreeMap<String, PatientInfo>,
}

impl Manifest {
    /// Builds the patient index and checks every invariant.
    pub fn from_samples(name: String, root: PathBuf, samples: Vec<SampleRecord>) -> Result<Self, DatasetError> {
        let mut patients: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.image_path.as_str()) {
                return Err(DatasetError::DuplicateImage(s.image_path.clone()));
            }
            patients.entry(s.patient_id.clone()).or_default().push(i);
        }
        let m = Self { name, root, samples, patients, patient_info: BTreeMap::new() };
        m.check_patient_exclusive()?;
        Ok(m)
    }

    pub fn check_patient_exclusive(&self) -> Result<(), DatasetError> {
        for (p, idx) in &self.patients {
            let first = self.samples[idx[0]].split;
            if idx.iter().any(|&i| self.samples[i].split != first) {
                return Err(DatasetError::MixedSplit(p.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.samples[i].image_path)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.samples[i].mask_path.as_ref().map(|m| self.root.join(m))
    }

    /// Sample indices assigned to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Patients per split, keyed by split.
    pub fn patient_counts(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for idx in self.patients.values() {
            *out.entry(self.samples[idx[0]].split).or_insert(0) += 1;
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            name: self.name.clone(),
            root: self.root.clone(),
            images: self
                .samples
                .iter()
                .map(|s| ImageEntry {
                    location: s.image_path.clone(),
                    label: s.mask_path.clone(),
                    patient: s.patient_id.clone(),
                    has_nodule: s.has_nodule,
                    pixel_spacing: s.pixel_spacing,
                })
                .collect(),
            split: SplitIndices {
                training: self.indices(Split::Training),
                validation: self.indices(Split::Validation),
                test: self.indices(Split::Test),
            },
            patients: self.patient_info.clone(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        let mut samples: Vec<SampleRecord> = file
            .images
            .into_iter()
            .map(|e| SampleRecord {
                image_path: e.location,
                mask_path: e.label,
                patient_id: e.patient,
                has_nodule: e.has_nodule,
                split: Split::Unassigned,
                pixel_spacing: e.pixel_spacing,
            })
            .collect();
        for (split, idx) in [
            (Split::Training, &file.split.training),
            (Split::Validation, &file.split.validation),
            (Split::Test, &file.split.test),
        ] {
            for &i in idx {
                let s = samples
                    .get_mut(i)
                    .ok_or_else(|| DatasetError::Invalid(format!("{split} index {i} out of range")))?;
                if s.split != Split::Unassigned {
                    return Err(DatasetError::Invalid(format!("image {i} listed in two splits")));
                }
                s.split = split;
            }
        }
        let mut m = Self::from_samples(file.name, file.root, samples)?;
        m.patient_info = file.patients;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{write_gray_png, GrayImage};

    fn fixture(dir: &Path) {
        for p in ["P1", "P2"] {
            fs::create_dir_all(dir.join(p)).unwrap();
            for s in 0..3 {
                write_gray_png(&dir.join(format!("{p}/s{s}.png")), &GrayImage::new(4, 4, vec![10; 16]).unwrap()).unwrap();
            }
        }
        let mut fg = vec![0; 16];
        fg[5] = 255;
        write_gray_png(&dir.join("P1/s0_mask.png"), &GrayImage::new(4, 4, fg.clone()).unwrap()).unwrap();
        write_gray_png(&dir.join("P2/s2_mask.png"), &GrayImage::new(4, 4, fg).unwrap()).unwrap();
        write_gray_png(&dir.join("P2/s1_mask.png"), &GrayImage::new(4, 4, vec![0; 16]).unwrap()).unwrap();
    }

    #[test]
    fn builds_fixture_tree() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let m = build_manifest(dir.path()).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.samples.iter().filter(|s| s.has_nodule).count(), 2);
        assert_eq!(m.samples[0].image_path, "P1/s0.png");
        assert_eq!(m.samples[4].mask_path.as_deref(), Some("P2/s1_mask.png"));
        assert!(!m.samples[4].has_nodule);
        assert_eq!(m.patients["P2"], vec![3, 4, 5]);
    }

    #[test]
    fn empty_root() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_manifest(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no samples found"));
    }

    #[test]
    fn orphan_mask() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write_gray_png(&dir.path().join("P1/ghost_mask.png"), &GrayImage::new(1, 1, vec![0]).unwrap()).unwrap();
        match build_manifest(dir.path()).unwrap_err() {
            DatasetError::OrphanMask(p) => assert!(p.ends_with("P1/ghost_mask.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let mut m = build_manifest(dir.path()).unwrap();
        for i in 3..6 {
            m.samples[i].split = Split::Test;
        }
        m.patient_info.insert("P1".into(), PatientInfo { sex: Some("F".into()) });
        let back = Manifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mixed_split_rejected() {
        let text = r#"{"name":"x","root":"/","images":[
            {"location":"a/1.png","label":null,"patient":"a","has_nodule":false},
            {"location":"a/2.png","label":null,"patient":"a","has_nodule":false}],
            "split":{"training":[0],"validation":[1],"test":[]}}"#;
        assert!(matches!(Manifest::from_json(text), Err(DatasetError::MixedSplit(_))));
    }
}
