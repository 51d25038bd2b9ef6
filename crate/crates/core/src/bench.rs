//! Dense versus dynamic K-NN attention timing with analytic FLOP counters.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionFlops, DynamicKnnAttention};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::ops;
use crate::ops::sparse::Selection;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    /// Full module forward, dense softmax over all keys.
    pub dense_module_ms: f64,
    /// Full module forward with every query keeping `k` keys.
    pub sparse_module_ms: f64,
    /// Softmax plus aggregation on fixed scores, dense.
    pub dense_core_ms: f64,
    /// Top-k selection plus masked aggregation on the same scores.
    pub sparse_core_ms: f64,
    pub dense: AttentionFlops,
    pub sparse: AttentionFlops,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub channels: usize,
    pub heads: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { channels: 32, heads: 4, runs: 9, seed: 42 }
    }
}

/// Most square `h x w` grid with `h * w = n`.
pub fn grid_for(n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Config("N must be positive".into()));
    }
    let h = (1..=n).take_while(|h| h * h <= n).filter(|h| n.is_multiple_of(*h)).last().unwrap_or(1);
    Ok((h, n / h))
}

fn median_ms(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn bench_attention(n_list: &[usize], k_list: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for &n in n_list {
        let (h, w) = grid_for(n)?;
        let x = Tensor::uniform(Shape::new(1, opts.channels, h, w), -1.0, 1.0, &mut rng);
        let d = opts.channels / opts.heads.max(1);
        let scores = Tensor::uniform(Shape::new(1, opts.heads, n, n), -3.0, 3.0, &mut rng);
        let values = Tensor::uniform(Shape::new(1, opts.heads, n, d), -1.0, 1.0, &mut rng);
        for &k in k_list {
            if k == 0 {
                return Err(Error::Config("k must be positive".into()));
            }
            let k_eff = k.min(n);
            let cfg = AttentionConfig { heads: opts.heads, k_min: k_eff, k_max: k_eff, ..AttentionConfig::default() };
            let mut store = ParamStore::new();
            let module = DynamicKnnAttention::new(&mut store, "bench", opts.channels, cfg, true, &mut rng)?;
            let dense_module_ms = median_ms(opts.runs, || {
                let mut s = Session::new(&store, false);
                let xi = s.input(x.clone(), false)?;
                module.dense_forward(&mut s, xi).map(|_| ())
            })?;
            let sparse_module_ms = median_ms(opts.runs, || {
                let mut s = Session::new(&store, false);
                let xi = s.input(x.clone(), false)?;
                module.forward(&mut s, xi).map(|_| ())
            })?;
            let dense_core_ms = median_ms(opts.runs, || {
                let a = ops::softmax::rows(&scores);
                ops::matmul::nn(&a, &values).map(|_| ())
            })?;
            let kq = vec![k_eff; n];
            let sparse_core_ms = median_ms(opts.runs, || {
                let sel = Arc::new(Selection::top_k(&scores, &kq)?);
                ops::sparse::forward(&scores, &values, &sel).map(|_| ())
            })?;
            rows.push(BenchRow {
                n,
                k,
                dense_module_ms,
                sparse_module_ms,
                dense_core_ms,
                sparse_core_ms,
                dense: AttentionFlops::compute(1, opts.channels, n, &cfg, None),
                sparse: AttentionFlops::compute(1, opts.channels, n, &cfg, Some((n * k_eff) as u64)),
            });
        }
    }
    Ok(rows)
}

/// Counter-arithmetic properties of a result table: dense similarity
/// grows with `N^2` and sparse aggregation is linear in `k`.
pub fn check_scaling(rows: &[BenchRow]) -> Result<()> {
    for a in rows {
        for b in rows {
            if a.k == b.k && b.n == 4 * a.n && b.dense.similarity != 16 * a.dense.similarity {
                return Err(Error::Numerical(format!("similarity FLOPs not quadratic between N={} and N={}", a.n, b.n)));
            }
            if a.n == b.n && a.k <= a.n && b.k <= b.n && a.sparse.aggregation * b.k as u64 != b.sparse.aggregation * a.k as u64 {
                return Err(Error::Numerical(format!("aggregation FLOPs not linear in k at N={}", a.n)));
            }
        }
    }
    Ok(())
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "n",
        "k",
        "dense_module_ms",
        "sparse_module_ms",
        "dense_core_ms",
        "sparse_core_ms",
        "similarity_flops",
        "dense_softmax_flops",
        "dense_aggregation_flops",
        "sparse_softmax_flops",
        "sparse_aggregation_flops",
        "dense_total_flops",
        "sparse_total_flops",
    ])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.k.to_string(),
            format!("{:.4}", r.dense_module_ms),
            format!("{:.4}", r.sparse_module_ms),
            format!("{:.4}", r.dense_core_ms),
            format!("{:.4}", r.sparse_core_ms),
            r.dense.similarity.to_string(),
            r.dense.softmax.to_string(),
            r.dense.aggregation.to_string(),
            r.sparse.softmax.to_string(),
            r.sparse.aggregation.to_string(),
            r.dense.total().to_string(),
            r.sparse.total().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(grid_for(64).unwrap(), (8, 8));
        assert_eq!(grid_for(1024).unwrap(), (32, 32));
        assert_eq!(grid_for(12).unwrap(), (3, 4));
        assert_eq!(grid_for(7).unwrap(), (1, 7));
    }

    #[test]
    fn counters_scale() {
        let opts = BenchOptions { runs: 1, ..BenchOptions::default() };
        let rows = bench_attention(&[16, 64], &[4, 16], &opts).unwrap();
        check_scaling(&rows).unwrap();
        let at = |n, k| rows.iter().find(|r| r.n == n && r.k == k).unwrap();
        assert_eq!(at(64, 16).sparse.aggregation, 4 * at(64, 4).sparse.aggregation);
        assert_eq!(at(64, 4).dense.similarity, 16 * at(16, 4).dense.similarity);
    }
}
