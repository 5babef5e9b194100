//! Lung-nodule CT segmentation pipeline.
//!
//! The crate is organised the way the data flows:
//!
//! * [`ingest`] parses DICOM slices, rescales to Hounsfield units and windows them to `[0, 1]`.
//! * [`dataset`] catalogs image/mask pairs, assigns patient-exclusive splits and builds training views.
//! * [`tensor`] is a small dense 4-D engine with hand-written forward/backward kernels and Adam.
//! * [`unet`] builds, runs and checkpoints the encoder/decoder network.
//! * [`augment`], [`loader`] feed the trainer with prefetched, label-consistent batches.
//! * [`trainer`] minimises soft-Dice loss; [`metrics`] scores thresholded predictions.
//! * [`bench`] sweeps loader settings and times training/inference.
//!
//! Kernels and per-image scoring run on rayon when the `parallel` feature is enabled (the default).
//! Every reduction has a fixed order, so results do not depend on the number of threads.

pub mod augment;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod ingest;
pub mod loader;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
