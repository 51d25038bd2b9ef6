//! Sequential against data-parallel execution of the hot kernels.
//!
//! Set `KLON_THREADS` to size the worker pool; with a single thread the two
//! modes measure the dispatch overhead only.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use klonet_core::exec::{self, Exec};
use klonet_core::model::{Model, ModelSpec};
use klonet_core::nn::Session;
use klonet_core::ops::{self, sparse::Selection};
use klonet_core::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn conv(c: &mut Criterion) {
    exec::init_threads(None);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(Shape::new(4, 32, 64, 64), -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(Shape::new(32, 32, 3, 3), -0.1, 0.1, &mut rng);
    let mut group = c.benchmark_group("conv3x3_4x32x64x64");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| ops::conv::forward(&x, &w, None, 1, 1).unwrap())
        });
    }
    group.finish();
}

fn sparse_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1024;
    let scores = Tensor::uniform(Shape::new(1, 4, n, n), -3.0, 3.0, &mut rng);
    let v = Tensor::uniform(Shape::new(1, 4, n, 8), -1.0, 1.0, &mut rng);
    let k = vec![16; n];
    let mut group = c.benchmark_group("topk_aggregate_n1024_k16");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| {
                let sel = Arc::new(Selection::top_k(&scores, &k).unwrap());
                ops::sparse::forward(&scores, &v, &sel).unwrap()
            })
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let spec = ModelSpec { channels: vec![8, 16, 32, 64, 128], ..ModelSpec::default() };
    let model = Model::build(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(Shape::new(4, 1, 64, 64), -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("narrow_klonet_forward_4x64x64");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| {
                let mut s = Session::new(&model.store, false);
                let xi = s.input(x.clone(), false).unwrap();
                model.forward(&mut s, xi).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, sparse_attention, model_forward);
criterion_main!(benches);
