use std::path::PathBuf;

use crate::augment::AugmentError;
use crate::bench::BenchError;
use crate::dataset::DatasetError;
use crate::image::ImageError;
use crate::ingest::IngestError;
use crate::loader::LoaderError;
use crate::metrics::MetricsError;
use crate::tensor::TensorError;
use crate::trainer::TrainError;
use crate::unet::ModelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Umbrella error for callers that drive the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
