//! Label-consistent geometric augmentation: flips and quarter-turn rotations,
//! applied identically to an image and its mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;
use crate::ingest::NormImage;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("image is {0}x{1} but mask is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid augment policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Allowed rotations in quarter turns (0..=3), sampled uniformly.
    pub rotations: Vec<u8>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { p_hflip: 0.5, p_vflip: 0.5, rotations: vec![0, 1, 2, 3] }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { p_hflip: 0.0, p_vflip: 0.0, rotations: vec![0] }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for p in [self.p_hflip, self.p_vflip] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidPolicy(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(AugmentError::InvalidPolicy("rotations must be a non-empty subset of 0..=3".into()));
        }
        Ok(())
    }

    /// Draws one transform. Always consumes exactly three values from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let h: f64 = rng.random();
        let v: f64 = rng.random();
        let k = rng.random_range(0..self.rotations.len());
        Transform { hflip: h < self.p_hflip, vflip: v < self.p_vflip, quarter_turns: self.rotations[k] }
    }
}

/// Element of the dihedral group: optional flips, then a counter-clockwise rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { hflip: false, vflip: false, quarter_turns: 0 };

    /// Output dimensions for a `rows × cols` input.
    pub fn output_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (cols, rows)
        } else {
            (rows, cols)
        }
    }

    /// Source coordinate that lands at output `(y, x)`.
    fn source(&self, y: usize, x: usize, rows: usize, cols: usize) -> (usize, usize) {
        // Undo the rotation: a CCW quarter turn maps (r, c) → (cols-1-c, r).
        let (mut r, mut c) = match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, cols - 1 - y),
            2 => (rows - 1 - y, cols - 1 - x),
            _ => (rows - 1 - x, y),
        };
        if self.vflip {
            r = rows - 1 - r;
        }
        if self.hflip {
            c = cols - 1 - c;
        }
        (r, c)
    }

    /// Permutes a row-major buffer; returns the new buffer and its dimensions.
    pub fn apply<T: Copy>(&self, data: &[T], rows: usize, cols: usize) -> (Vec<T>, usize, usize) {
        let (orows, ocols) = self.output_dims(rows, cols);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..orows {
            for x in 0..ocols {
                let (r, c) = self.source(y, x, rows, cols);
                out.push(data[r * cols + c]);
            }
        }
        (out, orows, ocols)
    }

    pub fn apply_image(&self, img: &NormImage) -> NormImage {
        let (values, rows, cols) = self.apply(&img.values, img.rows, img.cols);
        NormImage { rows, cols, values }
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (data, rows, cols) = self.apply(&mask.data, mask.rows, mask.cols);
        BinaryMask { rows, cols, data }
    }
}

/// Samples one transform from `policy` and applies it to both image and mask.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &NormImage,
    mask: &BinaryMask,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> Result<(NormImage, BinaryMask, Transform), AugmentError> {
    if image.rows != mask.rows || image.cols != mask.cols {
        return Err(AugmentError::DimensionMismatch(image.rows, image.cols, mask.rows, mask.cols));
    }
    let t = policy.sample(rng);
    Ok((t.apply_image(image), t.apply_mask(mask), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn grid(rows: usize, cols: usize) -> Vec<u32> {
        (0..(rows * cols) as u32).collect()
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // 2x3:  0 1 2      rotated:  2 5
        //       3 4 5                1 4
        //                            0 3
        let t = Transform { quarter_turns: 1, ..Transform::IDENTITY };
        let (out, r, c) = t.apply(&grid(2, 3), 2, 3);
        assert_eq!((r, c), (3, 2));
        assert_eq!(out, vec![2, 5, 1, 4, 0, 3]);
    }

    #[test]
    fn flips_are_involutions() {
        for t in [
            Transform { hflip: true, ..Transform::IDENTITY },
            Transform { vflip: true, ..Transform::IDENTITY },
        ] {
            let g = grid(3, 4);
            let (once, r, c) = t.apply(&g, 3, 4);
            assert_ne!(once, g);
            assert_eq!(t.apply(&once, r, c).0, g);
        }
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let t = Transform { quarter_turns: 1, ..Transform::IDENTITY };
        let (mut d, mut r, mut c) = (grid(3, 5), 3, 5);
        for _ in 0..4 {
            (d, r, c) = t.apply(&d, r, c);
        }
        assert_eq!((d, r, c), (grid(3, 5), 3, 5));
    }

    #[test]
    fn identity_policy() {
        let img = NormImage { rows: 2, cols: 2, values: vec![0.1, 0.2, 0.3, 0.4] };
        let mask = BinaryMask { rows: 2, cols: 2, data: vec![1, 0, 0, 1] };
        let (i2, m2, t) = augment_pair(&img, &mask, &mut keyed_rng(&[1]), &AugmentPolicy::identity()).unwrap();
        assert_eq!((i2, m2, t), (img, mask, Transform::IDENTITY));
    }

    #[test]
    fn mismatch_and_policy_validation() {
        let img = NormImage { rows: 2, cols: 2, values: vec![0.0; 4] };
        let mask = BinaryMask::zeros(2, 3);
        assert!(augment_pair(&img, &mask, &mut keyed_rng(&[1]), &AugmentPolicy::default()).is_err());
        assert!(AugmentPolicy { p_hflip: 2.0, ..Default::default() }.validate().is_err());
        assert!(AugmentPolicy { rotations: vec![4], ..Default::default() }.validate().is_err());
    }
}
