use super::{Real, Tensor, TensorError};
use crate::par;

fn elementwise<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T + Sync + Send) -> Tensor<T> {
    let mut out = t.clone();
    let chunk = t.shape().plane().max(1);
    par::for_each_chunk_mut(out.data_mut(), chunk, |_, c| c.iter_mut().for_each(|x| *x = f(*x)));
    out
}

fn zip_with<T: Real>(
    op: &'static str,
    y: &Tensor<T>,
    g: &Tensor<T>,
    f: impl Fn(T, T) -> T + Sync + Send,
) -> Result<Tensor<T>, TensorError> {
    if y.shape() != g.shape() {
        return Err(TensorError::ShapeMismatch { op, detail: format!("{} vs {}", y.shape(), g.shape()) });
    }
    let mut out = g.clone();
    let chunk = g.shape().plane().max(1);
    let yd = y.data();
    par::for_each_chunk_mut(out.data_mut(), chunk, |i, c| {
        let ys = &yd[i * chunk..i * chunk + c.len()];
        c.iter_mut().zip(ys).for_each(|(gv, &yv)| *gv = f(yv, *gv));
    });
    Ok(out)
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    elementwise(t, |x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient of ReLU given its *output* `y`: passes `grad` where `y > 0`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_with("relu_backward", y, grad, |yv, g| if yv > T::zero() { g } else { T::zero() })
}

#[inline]
fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    elementwise(t, sigmoid_scalar)
}

/// Gradient of the logistic function given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_with("sigmoid_backward", y, grad, |yv, g| g * yv * (T::one() - yv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_grad() {
        let y = relu(&t(&[-1.0, 2.0, 0.0]));
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
        let g = relu_backward(&y, &t(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        let y = sigmoid(&t(&[0.0, 50.0, -50.0, 800.0, -800.0]));
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        // e^-50 = 1.9287498479639178e-22
        assert!((y.data()[2] - 1.928_749_847_963_917_8e-22).abs() < 1e-15);
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(y.data()[4], 0.0);
    }
}
