use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Shape, Tensor};

/// 2x2 max pooling with stride 2. Returns the output and, for every output
/// element, the flat input index it was taken from. Ties resolve to the
/// first window element in row-major order.
pub fn forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
        return Err(Error::Shape(format!("maxpool2x2 needs even height and width, got {s}")));
    }
    let (ho, wo) = (s.h() / 2, s.w() / 2);
    let out_shape = Shape::new(s.b(), s.c(), ho, wo);
    let planes = s.b() * s.c();
    let xd = x.data();
    let per_plane = exec::map(planes, |p| {
        let base = p * s.plane();
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * s.w() + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * s.w() + 2 * ox + dx;
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                vals.push(xd[best]);
                idx.push(best);
            }
        }
        (vals, idx)
    });
    let mut data = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    for (v, i) in per_plane {
        data.extend(v);
        argmax.extend(i);
    }
    Ok((Tensor::from_vec(out_shape, data)?, argmax))
}

pub fn backward(input_shape: Shape, argmax: &[usize], gy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        d[i] += g;
    }
    dx
}
