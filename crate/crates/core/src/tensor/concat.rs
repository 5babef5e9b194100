use super::{Real, Shape, Tensor, TensorError};

/// Channel-wise concatenation; the channels of `a` come first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(TensorError::ShapeMismatch { op: "concat_channels", detail: format!("{} vs {}", sa, sb) });
    }
    let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec(out, data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels, then the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let s = t.shape();
    if ca > s.c {
        return Err(TensorError::ShapeMismatch {
            op: "split_channels",
            detail: format!("cannot take {} channels from {}", ca, s),
        });
    }
    let sa = Shape::new(s.n, ca, s.h, s.w);
    let sb = Shape::new(s.n, s.c - ca, s.h, s.w);
    let mut da = Vec::with_capacity(sa.len());
    let mut db = Vec::with_capacity(sb.len());
    let split = ca * s.plane();
    for n in 0..s.n {
        let item = t.item(n);
        da.extend_from_slice(&item[..split]);
        db.extend_from_slice(&item[split..]);
    }
    Ok((Tensor::from_vec(sa, da)?, Tensor::from_vec(sb, db)?))
}
