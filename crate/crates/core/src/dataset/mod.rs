//! Dataset catalog: image/mask pairs, patient-exclusive splits, nodule statistics
//! and the training views fed to the loader.

mod components;
mod manifest;
mod split;
mod stats;
mod view;

pub use components::{component_areas, equivalent_diameter};
pub use manifest::{build_manifest, Manifest, PatientInfo, SampleRecord, Split};
pub use split::{split_by_patient, split_counts, SplitRatios};
pub use stats::{nodule_stats, DiameterBin, NoduleStats, SplitNoduleCounts};
pub use view::{split_view, training_view, MaskSource, ViewSample};

use std::path::PathBuf;

use crate::image::ImageError;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("no samples found under {0}")]
    NoSamples(PathBuf),
    #[error("mask {0} has no matching image")]
    OrphanMask(PathBuf),
    #[error("duplicate image path {0}")]
    DuplicateImage(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("need at least {needed} patients to split, found {found}")]
    TooFewPatients { needed: usize, found: usize },
    #[error("patient {0} has samples in more than one split")]
    MixedSplit(String),
    #[error("slice {0} has no pixel spacing metadata")]
    MissingSpacing(String),
    #[error("split {0} contains no nodule-bearing samples")]
    NoNoduleSamples(Split),
    #[error("split {0} contains no samples without nodules")]
    NoBlackSamples(Split),
    #[error("black-mask fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
