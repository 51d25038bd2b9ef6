//! Layout operations: channel concat/slice and the multi-head reshape.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.b() != sb.b() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(Error::Shape(format!("concat_channels needs matching B,H,W: {sa} vs {sb}")));
    }
    let out = Shape::new(sa.b(), sa.c() + sb.c(), sa.h(), sa.w());
    let mut data = Vec::with_capacity(out.numel());
    for i in 0..sa.b() {
        data.extend_from_slice(&a.data()[i * sa.item()..(i + 1) * sa.item()]);
        data.extend_from_slice(&b.data()[i * sb.item()..(i + 1) * sb.item()]);
    }
    Tensor::from_vec(out, data)
}

/// Channels `start..start + len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if len == 0 || start + len > s.c() {
        return Err(Error::Shape(format!("channel slice {start}..{} out of range for {s}", start + len)));
    }
    let out = Shape::new(s.b(), len, s.h(), s.w());
    let mut data = Vec::with_capacity(out.numel());
    for i in 0..s.b() {
        let off = i * s.item() + start * s.plane();
        data.extend_from_slice(&x.data()[off..off + len * s.plane()]);
    }
    Tensor::from_vec(out, data)
}

/// Adjoint of [`slice_channels`]: embed `gy` into zeros of `full`.
pub fn slice_channels_backward(full: Shape, start: usize, gy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(full);
    let len = gy.shape().c();
    for i in 0..full.b() {
        let off = i * full.item() + start * full.plane();
        let src = &gy.data()[i * gy.shape().item()..(i + 1) * gy.shape().item()];
        dx.data_mut()[off..off + len * full.plane()].copy_from_slice(src);
    }
    dx
}

/// `[B, C, H, W]` to `[B, h, N, C/h]`: head `k` owns channels
/// `k*d..(k+1)*d` and rows run over row-major spatial positions.
pub fn to_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    if heads == 0 || !s.c().is_multiple_of(heads) {
        return Err(Error::Shape(format!("{} channels not divisible into {heads} heads", s.c())));
    }
    let d = s.c() / heads;
    let n = s.plane();
    let out = Shape::new(s.b(), heads, n, d);
    let mut y = Tensor::zeros(out);
    let (xd, yd) = (x.data(), y.data_mut());
    for b in 0..s.b() {
        for hd in 0..heads {
            for j in 0..d {
                let src = &xd[(b * s.c() + hd * d + j) * n..][..n];
                for (p, &v) in src.iter().enumerate() {
                    yd[((b * heads + hd) * n + p) * d + j] = v;
                }
            }
        }
    }
    Ok(y)
}

/// Inverse of [`to_heads`] back onto an `h x w` grid.
pub fn from_heads(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let (heads, n, d) = (s.c(), s.h(), s.w());
    if n != h * w {
        return Err(Error::Shape(format!("from_heads: {n} positions cannot fill {h}x{w}")));
    }
    let out = Shape::new(s.b(), heads * d, h, w);
    let mut y = Tensor::zeros(out);
    let (xd, yd) = (x.data(), y.data_mut());
    for b in 0..s.b() {
        for hd in 0..heads {
            for j in 0..d {
                let dst = &mut yd[(b * heads * d + hd * d + j) * n..][..n];
                for (p, v) in dst.iter_mut().enumerate() {
                    *v = xd[((b * heads + hd) * n + p) * d + j];
                }
            }
        }
    }
    Ok(y)
}
