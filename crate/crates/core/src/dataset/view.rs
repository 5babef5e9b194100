use std::path::PathBuf;

use rand::seq::index;

use super::{DatasetError, Manifest, Split};
use crate::rng::keyed_rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskSource {
    File(PathBuf),
    /// All-zero mask synthesized at load time.
    Empty,
}

/// One entry of an ordered sample list handed to the loader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSample {
    /// Manifest index (or source-defined id for in-memory data).
    pub id: usize,
    pub image: PathBuf,
    pub mask: MaskSource,
}

fn entry(m: &Manifest, i: usize) -> ViewSample {
    let mask = match (m.samples[i].has_nodule, m.mask_path(i)) {
        (true, Some(p)) => MaskSource::File(p),
        _ => MaskSource::Empty,
    };
    ViewSample { id: i, image: m.image_path(i), mask }
}

fn black_count(frac: f64, pool: usize) -> usize {
    // ceil with slack so 0.02 * 100 stays 2
    (((frac * pool as f64) - 1e-9).ceil().max(0.0) as usize).min(pool)
}

/// Every nodule-bearing sample of `split`, plus `ceil(black_frac · k)` of its `k`
/// no-nodule samples drawn without replacement, ordered by manifest index.
pub fn training_view(m: &Manifest, split: Split, black_frac: f64, seed: u64) -> Result<Vec<ViewSample>, DatasetError> {
    if !(0.0..=1.0).contains(&black_frac) {
        return Err(DatasetError::InvalidFraction(black_frac));
    }
    let idx = m.indices(split);
    let (nodule, black): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| m.samples[i].has_nodule);
    if nodule.is_empty() {
        return Err(DatasetError::NoNoduleSamples(split));
    }
    let take = black_count(black_frac, black.len());
    let mut chosen: Vec<usize> = if take > 0 {
        index::sample(&mut keyed_rng(&[seed, 0xB1AC]), black.len(), take).into_iter().map(|j| black[j]).collect()
    } else {
        Vec::new()
    };
    chosen.extend(nodule);
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| entry(m, i)).collect())
}

/// All samples of `split`, with and without nodules.
pub fn split_view(m: &Manifest, split: Split) -> Vec<ViewSample> {
    m.indices(split).into_iter().map(|i| entry(m, i)).collect()
}
