use crate::tensor::Tensor;

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Softmax along the last axis; each `W`-length row sums to one.
pub fn rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let w = x.shape().w();
    y.data_mut().chunks_mut(w).for_each(softmax_in_place);
    y
}

pub fn rows_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let w = y.shape().w();
    let mut dx = Tensor::zeros(y.shape());
    for ((d, yr), gr) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)).zip(gy.data().chunks(w)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
            *dv = yv * (gv - dot);
        }
    }
    dx
}

/// Softmax across the channel axis at every pixel.
pub fn channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let mut y = x.clone();
    let mut buf = vec![0.0; c];
    for b in 0..s.b() {
        let item = &mut y.data_mut()[b * c * plane..(b + 1) * c * plane];
        for p in 0..plane {
            for ch in 0..c {
                buf[ch] = item[ch * plane + p];
            }
            softmax_in_place(&mut buf);
            for ch in 0..c {
                item[ch * plane + p] = buf[ch];
            }
        }
    }
    y
}

pub fn channels_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let s = y.shape();
    let (c, plane) = (s.c(), s.plane());
    let mut dx = Tensor::zeros(s);
    let (yd, gd) = (y.data(), gy.data());
    let dd = dx.data_mut();
    for b in 0..s.b() {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: f64 = (0..c).map(|ch| yd[base + ch * plane + p] * gd[base + ch * plane + p]).sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dd[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_row() {
        let y = rows(&Tensor::zeros(Shape::new(1, 1, 1, 3)));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1000.0, 999.0]).unwrap();
        let y = rows(&x);
        assert!(y.is_finite());
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn channel_softmax_two_classes_is_sigmoid_of_difference() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![0.3, -1.0, 1.1, 2.0]).unwrap();
        let y = channels(&x);
        let s = crate::ops::elementwise::sigmoid_scalar(1.1 - 0.3);
        assert!((y.at(0, 1, 0, 0) - s).abs() < 1e-15);
        assert!((y.at(0, 0, 0, 1) + y.at(0, 1, 0, 1) - 1.0).abs() < 1e-15);
    }
}
