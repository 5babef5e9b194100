//! 2×2, stride-2 transposed convolution (the decoder's up-step).

use super::{Conv2dGrads, Real, Shape, Tensor, TensorError};
use crate::par;

fn check<T: Real>(op: &'static str, is: Shape, weight: &Tensor<T>) -> Result<usize, TensorError> {
    let ws = weight.shape();
    if ws.h != 2 || ws.w != 2 {
        return Err(TensorError::ShapeMismatch { op, detail: format!("kernel must be 2x2, got {}x{}", ws.h, ws.w) });
    }
    if ws.n != is.c {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("input has {} channels, weight expects {}", is.c, ws.n),
        });
    }
    Ok(ws.c)
}

/// `input (N, Cin, H, W)`, `weight (Cin, Cout, 2, 2)` → `(N, Cout, 2H, 2W)`.
///
/// Each input pixel scatters a 2×2 block; blocks never overlap at stride 2.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let is = input.shape();
    let cout = check("conv_transpose2d", is, weight)?;
    if bias.len() != cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("bias has {} entries, expected {}", bias.len(), cout),
        });
    }
    let cin = is.c;
    let os = Shape::new(is.n, cout, 2 * is.h, 2 * is.w);
    let mut out = Tensor::zeros(os);
    let (xd, wd, bd) = (input.data(), weight.data(), bias.data());
    let ow = os.w;
    par::for_each_chunk_mut(out.data_mut(), os.plane(), |idx, o| {
        let (n, co) = (idx / cout, idx % cout);
        o.fill(bd[co]);
        for ci in 0..cin {
            let src = &xd[(n * cin + ci) * is.plane()..(n * cin + ci + 1) * is.plane()];
            let k = &wd[(ci * cout + co) * 4..(ci * cout + co + 1) * 4];
            for y in 0..is.h {
                let top = 2 * y * ow;
                let bottom = top + ow;
                for (x, &v) in src[y * is.w..(y + 1) * is.w].iter().enumerate() {
                    o[top + 2 * x] += v * k[0];
                    o[top + 2 * x + 1] += v * k[1];
                    o[bottom + 2 * x] += v * k[2];
                    o[bottom + 2 * x + 1] += v * k[3];
                }
            }
        }
    });
    Ok(out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>, TensorError> {
    let is = input.shape();
    let cout = check("conv_transpose2d_backward", is, weight)?;
    let cin = is.c;
    let os = Shape::new(is.n, cout, 2 * is.h, 2 * is.w);
    if grad_out.shape() != os {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d_backward",
            detail: format!("grad_out {} does not match forward output {}", grad_out.shape(), os),
        });
    }
    let (xd, wd, gd) = (input.data(), weight.data(), grad_out.data());
    let ow = os.w;

    let mut grad_in = Tensor::zeros(is);
    par::for_each_chunk_mut(grad_in.data_mut(), is.plane(), |idx, gi| {
        let (n, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g = &gd[(n * cout + co) * os.plane()..(n * cout + co + 1) * os.plane()];
            let k = &wd[(ci * cout + co) * 4..(ci * cout + co + 1) * 4];
            for y in 0..is.h {
                let top = 2 * y * ow;
                let bottom = top + ow;
                for x in 0..is.w {
                    gi[y * is.w + x] += k[0] * g[top + 2 * x]
                        + k[1] * g[top + 2 * x + 1]
                        + k[2] * g[bottom + 2 * x]
                        + k[3] * g[bottom + 2 * x + 1];
                }
            }
        }
    });

    let mut grad_w = Tensor::zeros(weight.shape());
    par::for_each_chunk_mut(grad_w.data_mut(), 4, |idx, gk| {
        let (ci, co) = (idx / cout, idx % cout);
        for n in 0..is.n {
            let src = &xd[(n * cin + ci) * is.plane()..(n * cin + ci + 1) * is.plane()];
            let g = &gd[(n * cout + co) * os.plane()..(n * cout + co + 1) * os.plane()];
            let mut acc = [T::zero(); 4];
            for y in 0..is.h {
                let top = 2 * y * ow;
                let bottom = top + ow;
                for x in 0..is.w {
                    let v = src[y * is.w + x];
                    acc[0] += v * g[top + 2 * x];
                    acc[1] += v * g[top + 2 * x + 1];
                    acc[2] += v * g[bottom + 2 * x];
                    acc[3] += v * g[bottom + 2 * x + 1];
                }
            }
            for (a, b) in gk.iter_mut().zip(acc) {
                *a += b;
            }
        }
    });

    let mut grad_b = Tensor::zeros(Shape::new(1, cout, 1, 1));
    par::for_each_chunk_mut(grad_b.data_mut(), 1, |co, gb| {
        let mut acc = T::zero();
        for n in 0..is.n {
            acc += gd[(n * cout + co) * os.plane()..(n * cout + co + 1) * os.plane()].iter().copied().sum::<T>();
        }
        gb[0] = acc;
    });

    Ok(Conv2dGrads { input: grad_in, weight: grad_w, bias: grad_b })
}
