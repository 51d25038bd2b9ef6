//! Per-channel batch normalisation.

use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Result of a training-mode forward: output, normalised input, per-channel
/// inverse std, batch mean and unbiased batch variance (for running stats).
pub struct BnTrainOut {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub invstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub fn forward_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> BnTrainOut {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let m = (s.b() * plane) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..s.b() {
            let off = (b * c + ch) * plane;
            acc += xd[off..off + plane].iter().sum::<f64>();
        }
        mean[ch] = acc / m;
        let mut sq = 0.0;
        for b in 0..s.b() {
            let off = (b * c + ch) * plane;
            sq += xd[off..off + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
        var[ch] = sq / m;
    }
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = Tensor::zeros(s);
    let yd = y.data_mut();
    for b in 0..s.b() {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (xd[i] - mean[ch]) * invstd[ch];
                yd[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    let var_unbiased = var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect();
    BnTrainOut { y, xhat, invstd, mean, var_unbiased }
}

/// Eval-mode forward with running statistics. Returns output, normalised
/// input and per-channel inverse std.
pub fn forward_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = Tensor::zeros(s);
    let yd = y.data_mut();
    for b in 0..s.b() {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (xd[i] - running_mean[ch]) * invstd[ch];
                yd[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (y, xhat, invstd)
}

/// Gradients `(dx, dgamma, dbeta)`. In training mode the batch statistics
/// depend on `x`, which adds the mean-centering terms to `dx`.
pub fn backward(
    shape: Shape,
    gamma: &[f64],
    xhat: &[f64],
    invstd: &[f64],
    training: bool,
    gy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (c, plane) = (shape.c(), shape.plane());
    let m = (shape.b() * plane) as f64;
    let gd = gy.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..shape.b() {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += gd[i] * xhat[i];
                dbeta[ch] += gd[i];
            }
        }
    }
    let mut dx = Tensor::zeros(shape);
    let dd = dx.data_mut();
    for b in 0..shape.b() {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma[ch] * invstd[ch];
            for i in off..off + plane {
                dd[i] = if training {
                    k / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
