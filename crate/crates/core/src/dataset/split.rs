use rand::seq::SliceRandom;

use super::{DatasetError, Manifest, Split};
use crate::rng::keyed_rng;

/// Fractions of patients assigned to training / validation / test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(r));
        }
        Ok(())
    }
}

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
const FLOOR_SLACK: f64 = 1e-9;

/// Patient counts `(train, val, test)`: floor for the first two, remainder to test.
pub fn split_counts(patients: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let p = patients as f64;
    let n_train = ((p * ratios.train + FLOOR_SLACK).floor() as usize).min(patients);
    let n_val = ((p * ratios.val + FLOOR_SLACK).floor() as usize).min(patients - n_train);
    (n_train, n_val, patients - n_train - n_val)
}

/// Shuffles patients with a seeded generator and assigns each patient, with all of
/// its samples, to exactly one split.
pub fn split_by_patient(m: &Manifest, ratios: &SplitRatios, seed: u64) -> Result<Manifest, DatasetError> {
    ratios.validate()?;
    let found = m.patients.len();
    if found < 3 {
        return Err(DatasetError::TooFewPatients { needed: 3, found });
    }
    let mut ids: Vec<&String> = m.patients.keys().collect();
    ids.shuffle(&mut keyed_rng(&[seed, 0x5911_7000]));
    let (n_train, n_val, _) = split_counts(found, ratios);
    let mut out = m.clone();
    for (rank, id) in ids.into_iter().enumerate() {
        let split = if rank < n_train {
            Split::Training
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        for &i in &m.patients[id] {
            out.samples[i].split = split;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleRecord;

    fn manifest(patients: usize, per: usize) -> Manifest {
        let samples = (0..patients * per)
            .map(|i| SampleRecord {
                image_path: format!("p{:04}/{}.png", i / per, i % per),
                mask_path: None,
                patient_id: format!("p{:04}", i / per),
                has_nodule: false,
                split: Split::Unassigned,
                pixel_spacing: None,
            })
            .collect();
        Manifest::from_samples("t".into(), "/".into(), samples).unwrap()
    }

    #[test]
    fn floor_remainder_counts() {
        let r = SplitRatios::default();
        assert_eq!(split_counts(623, &r), (498, 62, 63));
        assert_eq!(split_counts(10, &r), (8, 1, 1));
        let r = SplitRatios { train: 0.5, val: 0.29, test: 0.21 };
        assert_eq!(split_counts(100, &r), (50, 29, 21));
    }

    #[test]
    fn deterministic_and_exclusive() {
        let m = manifest(10, 3);
        let a = split_by_patient(&m, &SplitRatios::default(), 7).unwrap();
        let b = split_by_patient(&m, &SplitRatios::default(), 7).unwrap();
        assert_eq!(a, b);
        a.check_patient_exclusive().unwrap();
        let counts = a.patient_counts();
        assert_eq!(counts[&Split::Training], 8);
        assert_eq!(counts[&Split::Validation], 1);
        assert_eq!(counts[&Split::Test], 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(split_by_patient(&manifest(5, 1), &r, 0), Err(DatasetError::InvalidRatios(_))));
        assert!(matches!(
            split_by_patient(&manifest(2, 1), &SplitRatios::default(), 0),
            Err(DatasetError::TooFewPatients { found: 2, .. })
        ));
    }
}
