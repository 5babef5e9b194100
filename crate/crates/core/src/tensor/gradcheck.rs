//! Central-difference gradient checking.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{PoolIndices, Real, Tensor, TensorError};

/// One evaluation of a scalar objective.
///
/// `kinks` fingerprints every piecewise branch taken (ReLU on/off pattern, pooling
/// winners). Two evaluations with different fingerprints straddle a non-differentiable
/// point. Smooth objectives leave it at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub kinks: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self { value, kinks: 0 }
    }
}

impl From<f64> for Probe {
    fn from(value: f64) -> Self {
        Self::smooth(value)
    }
}

/// Fingerprint of ReLU activation patterns and pooling argmaxes.
pub fn kink_signature<T: Real>(relu_outputs: &[&Tensor<T>], pools: &[&PoolIndices]) -> u64 {
    let mut h = DefaultHasher::new();
    for t in relu_outputs {
        for chunk in t.data().chunks(64) {
            let mut bits = 0u64;
            for (i, &v) in chunk.iter().enumerate() {
                if v > T::zero() {
                    bits |= 1 << i;
                }
            }
            bits.hash(&mut h);
        }
    }
    for p in pools {
        p.argmax.hash(&mut h);
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |a - n| / max(|a|, |n|, 1e-12).
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±eps probes crossed a kink.
    pub skipped: Vec<usize>,
}

/// Compares `analytic` against central differences of `f` around `input`.
pub fn grad_check<F>(mut f: F, input: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&Tensor<f64>) -> Probe,
{
    if analytic.shape() != input.shape() {
        return Err(TensorError::GradCheck(format!(
            "analytic gradient {} does not match input {}",
            analytic.shape(),
            input.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(TensorError::GradCheck("eps must be positive".into()));
    }
    let center = f(input);
    let mut x = input.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, skipped: Vec::new() };
    for i in 0..input.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(&x);
        x.data_mut()[i] = orig - eps;
        let minus = f(&x);
        x.data_mut()[i] = orig;
        if plus.kinks != center.kinks || minus.kinks != center.kinks {
            report.skipped.push(i);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_sum_matches_exactly() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |i| (i as f64).sin());
        let ones = Tensor::full(x.shape(), 1.0);
        let r = grad_check(|t| Probe::smooth(t.sum()), &x, &ones, 1e-5).unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let wrong = Tensor::full(x.shape(), 3.0);
        let r = grad_check(|t| Probe::smooth(t.dot(t)), &x, &wrong, 1e-5).unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn kinks_are_skipped() {
        // |x| at exactly 0 is a kink; at 1 it is smooth.
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let g = Tensor::from_vec(x.shape(), vec![0.0, 1.0]).unwrap();
        let f = |t: &Tensor<f64>| Probe {
            value: t.data().iter().map(|v| v.abs()).sum(),
            kinks: t.data().iter().map(|&v| (v > 0.0) as u64 + 2 * (v < 0.0) as u64).fold(0, |a, b| a * 4 + b),
        };
        let r = grad_check(f, &x, &g, 1e-5).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert!(r.max_rel_error < 1e-9);
    }
}
