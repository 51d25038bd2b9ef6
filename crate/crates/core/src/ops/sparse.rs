//! Row-wise top-k selection and masked-softmax aggregation.
//!
//! Masked-out entries are never exponentiated: each row's softmax runs only
//! over its selected columns, so unselected weights are exactly zero.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Shape, Tensor};

/// Selected column indices for every row of a `[B, h, N, N]` score tensor,
/// stored ascending within each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    n: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

/// Indices of the `k` largest entries of `row`; ties go to the lower index.
pub fn top_k_row(row: &[f64], k: usize) -> Vec<u32> {
    let n = row.len();
    let k = k.min(n);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    if k < n && k > 0 {
        let cmp = |a: &u32, b: &u32| {
            row[*b as usize]
                .partial_cmp(&row[*a as usize])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

impl Selection {
    /// Top-k per row where `k_per_query[b * N + i]` applies to query `i` of
    /// batch item `b` in every head.
    pub fn top_k(scores: &Tensor, k_per_query: &[usize]) -> Result<Self> {
        let s = scores.shape();
        let (bsz, heads, n) = (s.b(), s.c(), s.h());
        if s.w() != n {
            return Err(Error::Shape(format!("top-k expects square score blocks, got {s}")));
        }
        if k_per_query.len() != bsz * n {
            return Err(Error::Shape(format!(
                "k map has {} entries, expected {}",
                k_per_query.len(),
                bsz * n
            )));
        }
        let sd = scores.data();
        let rows = exec::map(bsz * heads, |bh| {
            let b = bh / heads;
            (0..n)
                .map(|i| top_k_row(&sd[(bh * n + i) * n..][..n], k_per_query[b * n + i]))
                .collect::<Vec<_>>()
        });
        let mut offsets = Vec::with_capacity(bsz * heads * n + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for row in rows.into_iter().flatten() {
            if row.is_empty() {
                return Err(Error::Numerical("attention row selected no keys".into()));
            }
            indices.extend(row);
            offsets.push(indices.len());
        }
        Ok(Selection { n, offsets, indices })
    }

    /// Every column selected in every row.
    /// Selected key indices of all rows, concatenated.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn full(rows: usize, n: usize) -> Self {
        let indices = (0..rows).flat_map(|_| 0..n as u32).collect();
        let offsets = (0..=rows).map(|r| r * n).collect();
        Selection { n, offsets, indices }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Total number of selected entries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Binary mask with the same shape as the score tensor.
    pub fn dense_mask(&self, shape: Shape) -> Tensor {
        let mut m = Tensor::zeros(shape);
        let n = self.n;
        for r in 0..self.rows() {
            for &j in self.row(r) {
                m.data_mut()[r * n + j as usize] = 1.0;
            }
        }
        m
    }

    /// Scatter per-selection `weights` into a dense `[.., N, N]` tensor.
    pub fn scatter(&self, shape: Shape, weights: &[f64]) -> Tensor {
        let mut a = Tensor::zeros(shape);
        let n = self.n;
        for r in 0..self.rows() {
            for (p, &j) in (self.offsets[r]..self.offsets[r + 1]).zip(self.row(r)) {
                a.data_mut()[r * n + j as usize] = weights[p];
            }
        }
        a
    }
}

/// Output `[B, h, N, d]` and the per-selection attention weights.
pub fn forward(scores: &Tensor, v: &Tensor, sel: &Selection) -> Result<(Tensor, Vec<f64>)> {
    let (ss, sv) = (scores.shape(), v.shape());
    let n = ss.h();
    if sv.b() != ss.b() || sv.c() != ss.c() || sv.h() != n || sel.n() != n || sel.rows() != ss.b() * ss.c() * n {
        return Err(Error::Shape(format!("masked aggregate: scores {ss}, values {sv} and selection disagree")));
    }
    let d = sv.w();
    let (sd, vd) = (scores.data(), v.data());
    let blocks = exec::map(ss.b() * ss.c(), |bh| {
        let mut out = vec![0.0; n * d];
        let mut weights = Vec::new();
        for i in 0..n {
            let r = bh * n + i;
            let row = sel.row(r);
            let srow = &sd[r * n..][..n];
            let max = row.iter().map(|&j| srow[j as usize]).fold(f64::NEG_INFINITY, f64::max);
            let start = weights.len();
            let mut total = 0.0;
            for &j in row {
                let e = (srow[j as usize] - max).exp();
                total += e;
                weights.push(e);
            }
            let o = &mut out[i * d..(i + 1) * d];
            for (w, &j) in weights[start..].iter_mut().zip(row) {
                *w /= total;
                let vr = &vd[(bh * n + j as usize) * d..][..d];
                for (ov, &vv) in o.iter_mut().zip(vr) {
                    *ov += *w * vv;
                }
            }
        }
        (out, weights)
    });
    let mut data = Vec::with_capacity(sv.numel());
    let mut weights = Vec::with_capacity(sel.nnz());
    for (o, w) in blocks {
        data.extend(o);
        weights.extend(w);
    }
    Ok((Tensor::from_vec(sv, data)?, weights))
}

/// Gradients with respect to scores (dense, zero outside the selection)
/// and values.
pub fn backward(scores_shape: Shape, v: &Tensor, sel: &Selection, weights: &[f64], gy: &Tensor) -> (Tensor, Tensor) {
    let n = scores_shape.h();
    let d = v.shape().w();
    let (vd, gd) = (v.data(), gy.data());
    let blocks = exec::map(scores_shape.b() * scores_shape.c(), |bh| {
        let mut ds = vec![0.0; n * n];
        let mut dv = vec![0.0; n * d];
        let mut da = Vec::new();
        for i in 0..n {
            let r = bh * n + i;
            let row = sel.row(r);
            let w = &weights[sel.offsets[r]..sel.offsets[r + 1]];
            let g = &gd[r * d..][..d];
            da.clear();
            for &j in row {
                let vr = &vd[(bh * n + j as usize) * d..][..d];
                da.push(vr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>());
            }
            let dot: f64 = w.iter().zip(&da).map(|(a, b)| a * b).sum();
            for ((&j, &wj), &daj) in row.iter().zip(w).zip(&da) {
                ds[i * n + j as usize] = wj * (daj - dot);
                let dvr = &mut dv[j as usize * d..][..d];
                for (dvv, &gv) in dvr.iter_mut().zip(g) {
                    *dvv += wj * gv;
                }
            }
        }
        (ds, dv)
    });
    let mut ds = Vec::with_capacity(scores_shape.numel());
    let mut dv = Vec::with_capacity(v.numel());
    for (a, b) in blocks {
        ds.extend(a);
        dv.extend(b);
    }
    (
        Tensor::from_vec(scores_shape, ds).expect("score gradient shape"),
        Tensor::from_vec(v.shape(), dv).expect("value gradient shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest_with_low_index_ties() {
        assert_eq!(top_k_row(&[0.9, 0.1, 0.5], 2), vec![0, 2]);
        assert_eq!(top_k_row(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_row(&[3.0, 1.0, 2.0], 3), vec![0, 1, 2]);
        assert_eq!(top_k_row(&[3.0, 1.0, 2.0], 9), vec![0, 1, 2]);
    }

    #[test]
    fn single_neighbour_copies_best_value_row() {
        let s = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.1, 0.7, 0.9, -0.2]).unwrap();
        let v = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sel = Selection::top_k(&s, &[1, 1]).unwrap();
        let (o, w) = forward(&s, &v, &sel).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(o.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }
}
