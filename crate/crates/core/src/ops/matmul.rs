//! Matrix products batched over the leading two axes of rank-4 tensors.

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::gemm;
use crate::tensor::{Shape, Tensor};

fn check_batch(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a.b() != b.b() || a.c() != b.c() {
        return Err(Error::Shape(format!("{what}: batch axes differ, {a} vs {b}")));
    }
    Ok(())
}

/// `scale * a * b^T` for `a` `[.., N, D]` and `b` `[.., M, D]`, giving `[.., N, M]`.
pub fn nt(a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    check_batch(sa, sb, "matmul_nt")?;
    if sa.w() != sb.w() {
        return Err(Error::Shape(format!("matmul_nt: inner extents differ, {sa} vs {sb}")));
    }
    let (n, m, d) = (sa.h(), sb.h(), sa.w());
    let mut out = Tensor::zeros(Shape::new(sa.b(), sa.c(), n, m));
    let (ad, bd) = (a.data(), b.data());
    exec::for_each_chunk(out.data_mut(), n * m, |i, c| {
        gemm(n, d, m, scale, &ad[i * n * d..][..n * d], false, &bd[i * m * d..][..m * d], true, 0.0, c);
    });
    Ok(out)
}

pub fn nt_backward(a: &Tensor, b: &Tensor, scale: f64, gy: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let (n, m, d) = (sa.h(), sb.h(), sa.w());
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    let mut da = Tensor::zeros(sa);
    exec::for_each_chunk(da.data_mut(), n * d, |i, c| {
        gemm(n, m, d, scale, &gd[i * n * m..][..n * m], false, &bd[i * m * d..][..m * d], false, 0.0, c);
    });
    let mut db = Tensor::zeros(sb);
    exec::for_each_chunk(db.data_mut(), m * d, |i, c| {
        gemm(m, n, d, scale, &gd[i * n * m..][..n * m], true, &ad[i * n * d..][..n * d], false, 0.0, c);
    });
    (da, db)
}

/// `a * b` for `a` `[.., N, M]` and `b` `[.., M, D]`, giving `[.., N, D]`.
pub fn nn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    check_batch(sa, sb, "matmul_nn")?;
    if sa.w() != sb.h() {
        return Err(Error::Shape(format!("matmul_nn: inner extents differ, {sa} vs {sb}")));
    }
    let (n, m, d) = (sa.h(), sa.w(), sb.w());
    let mut out = Tensor::zeros(Shape::new(sa.b(), sa.c(), n, d));
    let (ad, bd) = (a.data(), b.data());
    exec::for_each_chunk(out.data_mut(), n * d, |i, c| {
        gemm(n, m, d, 1.0, &ad[i * n * m..][..n * m], false, &bd[i * m * d..][..m * d], false, 0.0, c);
    });
    Ok(out)
}

pub fn nn_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let (n, m, d) = (sa.h(), sa.w(), sb.w());
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    let mut da = Tensor::zeros(sa);
    exec::for_each_chunk(da.data_mut(), n * m, |i, c| {
        gemm(n, d, m, 1.0, &gd[i * n * d..][..n * d], false, &bd[i * m * d..][..m * d], true, 0.0, c);
    });
    let mut db = Tensor::zeros(sb);
    exec::for_each_chunk(db.data_mut(), m * d, |i, c| {
        gemm(m, n, d, 1.0, &ad[i * n * m..][..n * m], true, &gd[i * n * d..][..n * d], false, 0.0, c);
    });
    (da, db)
}
