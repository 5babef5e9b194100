//! Same-padded, stride-1 2-D cross-correlation.

use super::{Real, Shape, Tensor, TensorError};
use crate::par;

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_shapes<T: Real>(
    op: &'static str,
    input: Shape,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(), TensorError> {
    let ws = weight.shape();
    if ws.h % 2 == 0 || ws.w % 2 == 0 {
        return Err(TensorError::EvenKernel { op, kh: ws.h, kw: ws.w });
    }
    if ws.c != input.c {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("input has {} channels, weight expects {}", input.c, ws.c),
        });
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("bias has {} entries, weight has {} output channels", b.len(), ws.n),
            });
        }
    }
    Ok(())
}

/// `out[y, x] += k * src[y + dy, x + dx]` over every in-bounds position.
#[inline]
fn accumulate_shifted<T: Real>(out: &mut [T], src: &[T], h: usize, w: usize, dy: isize, dx: isize, k: T) {
    let (hi, wi) = (h as isize, w as isize);
    let y0 = (-dy).max(0);
    let y1 = (hi - dy).min(hi);
    let x0 = (-dx).max(0);
    let x1 = (wi - dx).min(wi);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    let (x0u, x1u) = (x0 as usize, x1 as usize);
    for y in y0..y1 {
        let orow = y as usize * w;
        let srow = (y + dy) as usize * w;
        let o = &mut out[orow + x0u..orow + x1u];
        let s = &src[(srow as isize + x0 + dx) as usize..(srow as isize + x1 + dx) as usize];
        for (a, &b) in o.iter_mut().zip(s) {
            *a += k * b;
        }
    }
}

/// `Σ a[y, x] * b[y + dy, x + dx]` over every in-bounds position.
#[inline]
fn shifted_dot<T: Real>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (hi, wi) = (h as isize, w as isize);
    let y0 = (-dy).max(0);
    let y1 = (hi - dy).min(hi);
    let x0 = (-dx).max(0);
    let x1 = (wi - dx).min(wi);
    let mut acc = T::zero();
    if y0 >= y1 || x0 >= x1 {
        return acc;
    }
    let (x0u, x1u) = (x0 as usize, x1 as usize);
    for y in y0..y1 {
        let arow = y as usize * w;
        let brow = (y + dy) as usize * w;
        let ra = &a[arow + x0u..arow + x1u];
        let rb = &b[(brow as isize + x0 + dx) as usize..(brow as isize + x1 + dx) as usize];
        let mut row = T::zero();
        for (&p, &q) in ra.iter().zip(rb) {
            row += p * q;
        }
        acc += row;
    }
    acc
}

/// Cross-correlation of `input (N, Cin, H, W)` with `weight (Cout, Cin, kh, kw)` plus a
/// per-channel bias, zero padded so the output keeps the input's H×W.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let is = input.shape();
    check_shapes("conv2d", is, weight, Some(bias))?;
    let ws = weight.shape();
    let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let os = Shape::new(is.n, cout, is.h, is.w);
    let mut out = Tensor::zeros(os);
    let plane = os.plane();
    let (wd, bd, xd) = (weight.data(), bias.data(), input.data());
    par::for_each_chunk_mut(out.data_mut(), plane, |idx, o| {
        let (n, co) = (idx / cout, idx % cout);
        o.fill(bd[co]);
        for ci in 0..cin {
            let src = &xd[(n * cin + ci) * plane..(n * cin + ci + 1) * plane];
            let k = &wd[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - ph;
                    let dx = kx as isize - pw;
                    accumulate_shifted(o, src, is.h, is.w, dy, dx, k[ky * kw + kx]);
                }
            }
        }
    });
    Ok(out)
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out (N, Cout, H, W)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>, TensorError> {
    let is = input.shape();
    check_shapes("conv2d_backward", is, weight, None)?;
    let ws = weight.shape();
    let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let gs = grad_out.shape();
    if gs != Shape::new(is.n, cout, is.h, is.w) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!("grad_out {} does not match forward output", gs),
        });
    }
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = is.plane();
    let (wd, xd, gd) = (weight.data(), input.data(), grad_out.data());

    let mut grad_in = Tensor::zeros(is);
    par::for_each_chunk_mut(grad_in.data_mut(), plane, |idx, gi| {
        let (n, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g = &gd[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            let k = &wd[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - ph;
                    let dx = kx as isize - pw;
                    accumulate_shifted(gi, g, is.h, is.w, -dy, -dx, k[ky * kw + kx]);
                }
            }
        }
    });

    let mut grad_w = Tensor::zeros(ws);
    par::for_each_chunk_mut(grad_w.data_mut(), kh * kw, |idx, gk| {
        let (co, ci) = (idx / cin, idx % cin);
        for n in 0..is.n {
            let g = &gd[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            let x = &xd[(n * cin + ci) * plane..(n * cin + ci + 1) * plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - ph;
                    let dx = kx as isize - pw;
                    gk[ky * kw + kx] += shifted_dot(g, x, is.h, is.w, dy, dx);
                }
            }
        }
    });

    let mut grad_b = Tensor::zeros(Shape::new(1, cout, 1, 1));
    par::for_each_chunk_mut(grad_b.data_mut(), 1, |co, gb| {
        let mut acc = T::zero();
        for n in 0..is.n {
            acc += gd[(n * cout + co) * plane..(n * cout + co + 1) * plane].iter().copied().sum::<T>();
        }
        gb[0] = acc;
    });

    Ok(Conv2dGrads { input: grad_in, weight: grad_w, bias: grad_b })
}
