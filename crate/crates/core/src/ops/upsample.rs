//! Bilinear 2x upsampling with half-pixel (align_corners = false) sampling.

use crate::exec;
use crate::tensor::{Shape, Tensor};

/// Per output coordinate: lower source index, upper source index and the
/// weight of the upper one.
fn axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let out_shape = Shape::new(s.b(), s.c(), 2 * h, 2 * w);
    let ty = axis_taps(h);
    let tx = axis_taps(w);
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    exec::for_each_chunk(out.data_mut(), out_shape.plane(), |p, o| {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                o[oy * 2 * w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    });
    out
}

/// Transpose of the interpolation map.
pub fn backward(input_shape: Shape, gy: &Tensor) -> Tensor {
    let (h, w) = (input_shape.h(), input_shape.w());
    let ty = axis_taps(h);
    let tx = axis_taps(w);
    let mut dx = Tensor::zeros(input_shape);
    let gd = gy.data();
    let out_plane = 4 * h * w;
    exec::for_each_chunk(dx.data_mut(), h * w, |p, d| {
        let g = &gd[p * out_plane..(p + 1) * out_plane];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * 2 * w + ox];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_row() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::full(Shape::new(2, 2, 3, 5), -0.75);
        let y = forward(&x);
        assert_eq!(y.shape(), Shape::new(2, 2, 6, 10));
        assert!(y.data().iter().all(|&v| (v + 0.75).abs() < 1e-15));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let s = Shape::new(1, 2, 3, 3);
        let x = Tensor::from_vec(s, (0..18).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
        let y = forward(&x);
        let g = Tensor::from_vec(y.shape(), (0..y.numel()).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = backward(s, &g);
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
