//! Dense 4-D (N, C, H, W) tensors and the layer kernels the U-Net needs.

mod activation;
mod adam;
mod concat;
mod conv;
mod gradcheck;
mod pool;
mod upconv;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use adam::{AdamConfig, Parameter};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, Conv2dGrads};
pub use gradcheck::{grad_check, kink_signature, GradCheckReport, Probe};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolIndices};
pub use upconv::{conv_transpose2d, conv_transpose2d_backward};

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Checkpoint and log name of the element type.
    const NAME: &'static str;

    /// Lossy conversion from `f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    LengthMismatch { shape: Shape, len: usize, expected: usize },
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: kernel size {kh}x{kw} must be odd for same padding")]
    EvenKernel { op: &'static str, kh: usize, kw: usize },
    #[error("maxpool2x2 needs even spatial dims, got {h}x{w}")]
    OddPoolInput { h: usize, w: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("invalid Adam config: {0}")]
    InvalidAdam(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
}

/// Extent of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one H×W plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len(), expected: shape.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape, data: (0..shape.len()).map(&mut f).collect() }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The H×W plane at batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Batch item `n` with all its channels.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                detail: format!("{} vs {}", self.shape, other.shape),
            });
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum()
    }

    /// First non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    /// Copies batch items `indices` (in order) into a new tensor.
    pub fn select_items(&self, indices: &[usize]) -> Self {
        let mut shape = self.shape;
        shape.n = indices.len();
        let mut data = Vec::with_capacity(shape.len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self { shape, data }
    }
}

pub(crate) fn check_finite<T: Real>(t: &Tensor<T>) -> bool {
    t.first_non_finite().is_none()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 4, .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |i| i as f64);
        assert_eq!(t.get(1, 2, 3, 4), 119.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
    }

    #[test]
    fn select_items_copies_in_order() {
        let t = Tensor::<f32>::from_fn(Shape::new(3, 1, 1, 2), |i| i as f32);
        let s = t.select_items(&[2, 0]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
