use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::gemm;
use crate::tensor::{Shape, Tensor};

/// Resolved geometry of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if x.c() != w.0[1] {
            return Err(Error::Shape(format!(
                "conv2d input {x} has {} channels but weight {w} expects {}",
                x.c(),
                w.0[1]
            )));
        }
        let (kh, kw) = (w.0[2], w.0[3]);
        let (hp, wp) = (x.h() + 2 * pad, x.w() + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {w} larger than padded input {x} (padding {pad})"
            )));
        }
        Ok(ConvGeom {
            cin: x.c(),
            cout: w.0[0],
            kh,
            kw,
            stride,
            pad,
            h: x.h(),
            w: x.w(),
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` `[B, C_in, H, W]` with `w` `[C_out, C_in, K_h, K_w]`.
pub fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(Error::Shape(format!(
                "conv2d bias {} does not match {} output channels",
                b.shape(),
                g.cout
            )));
        }
    }
    let bsz = x.shape().b();
    let out_shape = Shape::new(bsz, g.cout, g.ho, g.wo);
    let mut out = Tensor::zeros(out_shape);
    let in_item = x.shape().item();
    let out_item = out_shape.item();
    let plane = g.out_plane();
    let xd = x.data();
    let wd = w.data();
    exec::for_each_chunk(out.data_mut(), out_item, |bi, y| {
        let xi = &xd[bi * in_item..(bi + 1) * in_item];
        if g.is_pointwise() {
            gemm(g.cout, g.cin, plane, 1.0, wd, false, xi, false, 0.0, y);
        } else {
            let mut cols = vec![0.0; g.patch() * plane];
            im2col(xi, &g, &mut cols);
            gemm(g.cout, g.patch(), plane, 1.0, wd, false, &cols, false, 0.0, y);
        }
        if let Some(b) = b {
            for (co, row) in y.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(out)
}

/// Gradients `(dx, dw, db)`; each is computed only when requested.
pub fn backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    gy: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).expect("geometry validated in forward");
    let bsz = x.shape().b();
    let in_item = x.shape().item();
    let plane = g.out_plane();
    let out_item = g.cout * plane;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());

    let dx = need_x.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        exec::for_each_chunk(dx.data_mut(), in_item, |bi, dxi| {
            let gi = &gd[bi * out_item..(bi + 1) * out_item];
            if g.is_pointwise() {
                gemm(g.cin, g.cout, plane, 1.0, wd, true, gi, false, 0.0, dxi);
            } else {
                let mut cols = vec![0.0; g.patch() * plane];
                gemm(g.patch(), g.cout, plane, 1.0, wd, true, gi, false, 0.0, &mut cols);
                col2im(&cols, &g, dxi);
            }
        });
        dx
    });

    let dw = need_w.then(|| {
        let partials = exec::map(bsz, |bi| {
            let xi = &xd[bi * in_item..(bi + 1) * in_item];
            let gi = &gd[bi * out_item..(bi + 1) * out_item];
            let mut part = vec![0.0; w.numel()];
            if g.is_pointwise() {
                gemm(g.cout, plane, g.cin, 1.0, gi, false, xi, true, 0.0, &mut part);
            } else {
                let mut cols = vec![0.0; g.patch() * plane];
                im2col(xi, &g, &mut cols);
                gemm(g.cout, plane, g.patch(), 1.0, gi, false, &cols, true, 0.0, &mut part);
            }
            part
        });
        let mut dw = Tensor::zeros(w.shape());
        for part in partials {
            for (a, b) in dw.data_mut().iter_mut().zip(part) {
                *a += b;
            }
        }
        dw
    });

    let db = need_b.then(|| {
        let mut db = Tensor::zeros(Shape::new(g.cout, 1, 1, 1));
        for bi in 0..bsz {
            for co in 0..g.cout {
                let off = bi * out_item + co * plane;
                db.data_mut()[co] += gd[off..off + plane].iter().sum::<f64>();
            }
        }
        db
    });

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::from_vec(Shape::new(2, 1, 2, 3), (0..12).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn diagonal_difference_on_ramp() {
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let y = forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn padding_and_stride_geometry() {
        let x = Tensor::zeros(Shape::new(1, 2, 7, 5));
        let w = Tensor::zeros(Shape::new(3, 2, 3, 3));
        let y = forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 4, 3));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let msg = forward(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 1, 1]"), "{msg}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(forward(&x, &w, None, 1, 0).is_err());
    }
}
