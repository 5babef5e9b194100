use super::{Real, Shape, Tensor, TensorError};
use crate::par;

/// For every pooled output, the flat index of the winning input element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

/// 2×2, stride-2 max pooling. Ties go to the first element in row-major window order.
pub fn maxpool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices), TensorError> {
    let is = input.shape();
    if is.h % 2 != 0 || is.w % 2 != 0 {
        return Err(TensorError::OddPoolInput { h: is.h, w: is.w });
    }
    let os = Shape::new(is.n, is.c, is.h / 2, is.w / 2);
    let (oh, ow) = (os.h, os.w);
    let planes = par::map_indices(is.n * is.c, |p| {
        let src = &input.data()[p * is.plane()..(p + 1) * is.plane()];
        let mut vals = Vec::with_capacity(oh * ow);
        let mut idx = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * is.w + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + is.w, base + is.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                vals.push(src[best]);
                idx.push(p * is.plane() + best);
            }
        }
        (vals, idx)
    });
    let mut data = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    for (v, i) in planes {
        data.extend(v);
        argmax.extend(i);
    }
    Ok((Tensor::from_vec(os, data)?, PoolIndices { input_shape: is, argmax }))
}

/// Routes each pooled gradient back to its argmax position.
pub fn maxpool2x2_backward<T: Real>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>, TensorError> {
    if grad_out.len() != indices.argmax.len() {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2x2_backward",
            detail: format!("grad_out has {} elements, pool recorded {}", grad_out.len(), indices.argmax.len()),
        });
    }
    let mut grad_in = Tensor::zeros(indices.input_shape);
    let gi = grad_in.data_mut();
    // Windows are disjoint, so every input position receives at most one contribution.
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        gi[i] = g;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(v: [f64; 4]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 2, 2), v.to_vec()).unwrap()
    }

    #[test]
    fn max_and_routing() {
        let (y, idx) = maxpool2x2(&window([1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2x2_backward(&Tensor::full(y.shape(), 1.0), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_first_position() {
        let (y, idx) = maxpool2x2(&window([7.0; 4])).unwrap();
        let g = maxpool2x2_backward(&Tensor::full(y.shape(), 1.0), &idx).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert_eq!(maxpool2x2(&x).unwrap_err(), TensorError::OddPoolInput { h: 3, w: 4 });
    }

    #[test]
    fn multi_plane_layout() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 4, 2), |i| i as f64);
        let (y, _) = maxpool2x2(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 2, 1));
        assert_eq!(y.data(), &[3.0, 7.0, 11.0, 15.0, 19.0, 23.0, 27.0, 31.0]);
    }
}
