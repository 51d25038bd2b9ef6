//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use klonet_core::attention::{AttentionConfig, DynamicKnnAttention};
use klonet_core::bench::{self, BenchOptions};
use klonet_core::config::RunConfig;
use klonet_core::data::{generate_dataset, Manifest, PhantomParams, SliceSet, Split};
use klonet_core::exec;
use klonet_core::gradcheck;
use klonet_core::losses::{self, LossKind, LossWeights, TverskyParams};
use klonet_core::metrics::{self, BinaryMask, Hd95Mode};
use klonet_core::model::{Model, ModelSpec, Variant};
use klonet_core::nn::{ParamStore, Session};
use klonet_core::profile;
use klonet_core::report::CountReport;
use klonet_core::train;
use klonet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn work_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("create acceptance dir");
    d
}

fn c1_parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    for v in Variant::ABLATION {
        let r = CountReport::build(v, 256, 256).map_err(err)?;
        let want = match v {
            Variant::Baseline => 7_849_058,
            Variant::Csp => 6_287_522,
            Variant::Attention => 9_242_852,
            Variant::KloNet => 7_681_316,
            Variant::VanillaUnet => unreachable!(),
        };
        let rel = (r.total as f64 - want as f64).abs() / want as f64;
        ensure(rel <= 0.03, format!("{v}: {} vs {want}", r.total))?;
        ensure(r.rows.iter().all(|row| row.params == row.analytic), format!("{v}: per-layer delta nonzero"))?;
        parts.push(format!("{v}={}{}", r.total, if r.total == want { "" } else { " (inexact)" }));
    }
    Ok(parts.join(" "))
}

fn c2_vanilla() -> Outcome {
    let r = CountReport::build(Variant::VanillaUnet, 256, 256).map_err(err)?;
    ensure((r.total as f64 / 17_261_825.0 - 1.0).abs() <= 0.01, format!("params {}", r.total))?;
    ensure((r.size_mb / 65.85 - 1.0).abs() <= 0.01, format!("size {:.2} MB", r.size_mb))?;
    Ok(format!("params={} size={:.2} MB", r.total, r.size_mb))
}

fn c3_flop_ratio() -> Outcome {
    let k = profile::profile(&Variant::KloNet.spec(), 256, 256).map_err(err)?;
    let v = profile::profile(&Variant::VanillaUnet.spec(), 256, 256).map_err(err)?;
    let ratio = k.flops as f64 / v.flops as f64;
    ensure((0.285..=0.385).contains(&ratio), format!("ratio {ratio:.4}"))?;
    Ok(format!("{:.3} / {:.3} GFLOPs = {ratio:.4}", k.gflops(), v.gflops()))
}

fn c4_model_size() -> Outcome {
    let r = CountReport::build(Variant::KloNet, 256, 256).map_err(err)?;
    let shown = format!("{:.2}", r.size_mb);
    ensure(shown == "29.30", format!("size {shown} MB"))?;
    Ok(format!("{shown} MB"))
}

/// Multi-head softmax attention written with plain loops over the module's
/// stored weights.
fn naive_attention(store: &ParamStore, m: &DynamicKnnAttention, x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (b, c, n) = (s.b(), s.c(), s.plane());
    let heads = m.config.heads;
    let d = c / heads;
    let project = |id, bias: Option<&Tensor>, input: &[f64]| -> Vec<f64> {
        let w = store.get(id).data();
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            for co in 0..c {
                for p in 0..n {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..c {
                        acc += w[co * c + ci] * input[(bi * c + ci) * n + p];
                    }
                    out[(bi * c + co) * n + p] = acc;
                }
            }
        }
        out
    };
    let q = project(m.query.weight, None, x.data());
    let k = project(m.key.weight, None, x.data());
    let v = project(m.value.weight, None, x.data());
    let mut o = vec![0.0; b * c * n];
    let scale = 1.0 / (d as f64).sqrt();
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let at = |t: &[f64], ch: usize, p: usize| t[(bi * c + h * d + ch) * n + p];
                let scores: Vec<f64> = (0..n).map(|j| (0..d).map(|ch| at(&q, ch, i) * at(&k, ch, j)).sum::<f64>() * scale).collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..d {
                    o[(bi * c + h * d + ch) * n + i] = (0..n).map(|j| e[j] / z * at(&v, ch, j)).sum();
                }
            }
        }
    }
    let bias = m.proj.bias.map(|id| store.get(id));
    let y = project(m.proj.weight, bias, &o);
    y.iter().zip(x.data()).map(|(a, r)| if m.config.residual { a + r } else { *a }).collect()
}

fn c5_dense_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let c = 4 * heads * rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let n = h * w;
        let k = n + rng.gen_range(0..3);
        let cfg = AttentionConfig { heads, k_min: k, k_max: k, straight_through: false, residual: rng.gen_bool(0.5) };
        let mut store = ParamStore::new();
        let m = DynamicKnnAttention::new(&mut store, "a", c, cfg, true, &mut rng).map_err(err)?;
        let x = Tensor::uniform(Shape::new(2, c, h, w), -2.0, 2.0, &mut rng);
        let oracle = naive_attention(&store, &m, &x);
        let mut s = Session::new(&store, false);
        let xi = s.input(x.clone(), false).map_err(err)?;
        let sparse = m.forward(&mut s, xi).map_err(err)?;
        let dense = m.dense_forward(&mut s, xi).map_err(err)?;
        for out in [sparse, dense] {
            let diff = s.tape.value(out).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    ensure(worst <= 1e-10, format!("max abs diff {worst:e}"))?;
    Ok(format!("50 fixtures, max abs diff {worst:.2e}"))
}

fn c6_gradient_suite() -> Outcome {
    let results = gradcheck::run_suite(42).map_err(err)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.2e}", r.name, r.max_rel_err())).collect();
    ensure(failed.is_empty(), failed.join(", "))?;
    ensure(results.len() >= 10, "fewer than 10 checks")?;
    let worst = results.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel err {worst:.2e}", results.len()))
}

fn c7_sparsity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let c = 4 * heads;
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let n = h * w;
        let k_min = rng.gen_range(1..=4);
        let k_max = rng.gen_range(k_min..=40);
        let cfg = AttentionConfig { heads, k_min, k_max, ..AttentionConfig::default() };
        let mut store = ParamStore::new();
        let m = DynamicKnnAttention::new(&mut store, "a", c, cfg, true, &mut rng).map_err(err)?;
        let x = Tensor::uniform(Shape::new(2, c, h, w), -2.0, 2.0, &mut rng);
        let mut s = Session::new(&store, false);
        let xi = s.input(x, false).map_err(err)?;
        let (_, state) = m.forward_with_state(&mut s, xi, true).map_err(err)?;
        let st = state.expect("state");
        for (row, weights) in st.weights.data().chunks(n).enumerate() {
            let bi = row / (heads * n);
            let q = row % n;
            let tau = st.tau.data()[bi * n + q];
            let want_k = (((tau * k_max as f64).floor() as usize).clamp(k_min, k_max)).min(n);
            let ki = st.k[bi * n + q];
            ensure(ki == want_k, format!("trial {trial}: k {ki} vs clamp rule {want_k}"))?;
            ensure(ki >= k_min.min(n) && ki <= k_max.min(n), format!("trial {trial}: k {ki} out of bounds"))?;
            let sum: f64 = weights.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-10, format!("trial {trial}: row sum {sum}"))?;
            let zeros = weights.iter().filter(|&&v| v == 0.0).count();
            ensure(zeros == n - ki, format!("trial {trial}: {zeros} zeros, expected {}", n - ki))?;
        }
    }
    Ok("100 forwards: rows sum to 1, N-k zeros, k clamped".into())
}

fn c8_hard_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let mut spec = ModelSpec { channels: vec![4, 8, 16, 32, 64], csp_depth: 1, ..ModelSpec::default() };
        spec.attention.heads = 2;
        spec.attention.k_min = 1;
        spec.attention.k_max = 3;
        let model = Model::build(&spec, trial).map_err(err)?;
        let x = Tensor::uniform(Shape::new(2, 1, 32, 32), -1.0, 1.0, &mut rng);
        let target: Vec<f64> = (0..2 * 32 * 32).map(|i| f64::from(u8::from((i % 32) > 12))).collect();
        let phi: Vec<f64> = (0..target.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let kind = if trial % 2 == 0 { LossKind::default() } else { LossKind::FocalTversky(TverskyParams::default()) };
        let mut s = Session::new(&model.store, true);
        let xi = s.input(x, false).map_err(err)?;
        let logits = model.forward(&mut s, xi).map_err(err)?;
        let (loss, _) = losses::loss_on_logits(&mut s, logits, &target, &phi, &kind).map_err(err)?;
        s.tape.backward(loss);
        let mut gate_params = 0;
        for (id, g) in s.param_grads() {
            let name = &model.store.param(id).name;
            if name.contains(".gate.") {
                gate_params += 1;
                ensure(g.data().iter().all(|&v| v == 0.0), format!("trial {trial}: nonzero gradient on {name}"))?;
            }
        }
        ensure(gate_params == 8, format!("expected 8 gating tensors, saw {gate_params}"))?;
    }
    Ok("10 fixtures, every gating gradient exactly 0".into())
}

fn boundary_oracle(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(a, b)| !inside(a, b)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn hd95_oracle(p: &BinaryMask, g: &BinaryMask) -> Option<f64> {
    let (bp, bg) = (boundary_oracle(p), boundary_oracle(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let pct = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|a| to.iter().map(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(d.len() - 1);
        d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
    };
    Some(pct(&bp, &bg).max(pct(&bg, &bp)))
}

fn c9_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for pair in 0..200 {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let dens = (rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7));
        let pb: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(dens.0))).collect();
        let gb: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(dens.1))).collect();
        let p = BinaryMask::from_bits(h, w, &pb).map_err(err)?;
        let g = BinaryMask::from_bits(h, w, &gb).map_err(err)?;
        let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (a, b) in p.bits().iter().zip(g.bits()) {
            inter += usize::from(*a && *b);
            np += usize::from(*a);
            ng += usize::from(*b);
        }
        let want_dsc = if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 };
        let union = np + ng - inter;
        let want_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let d = metrics::dsc(&p, &g).map_err(err)?;
        let i = metrics::iou(&p, &g).map_err(err)?;
        ensure(d == want_dsc && i == want_iou, format!("pair {pair}: dsc {d} vs {want_dsc}, iou {i} vs {want_iou}"))?;
        ensure((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12, format!("pair {pair}: DSC/IoU identity"))?;
        let hd = metrics::hd95_with(&p, &g, Hd95Mode::MaxOfDirected).map_err(err)?;
        match (hd, hd95_oracle(&p, &g)) {
            (None, None) => {}
            (Some(a), Some(b)) => ensure((a - b).abs() <= 1e-9, format!("pair {pair}: hd95 {a} vs {b}"))?,
            (a, b) => return Err(format!("pair {pair}: hd95 {a:?} vs {b:?}")),
        }
    }
    Ok("200 random pairs agree with brute force".into())
}

fn c10_loss_fixtures() -> Outcome {
    let ab = RunConfig::parse_str("loss=ablation\n").map_err(err)?;
    let ab = RunConfig::parse_str(&ab.to_text()).map_err(err)?;
    ensure(ab.loss == LossKind::Ablation(LossWeights { dice: 0.9, boundary: 0.1 }), format!("{:?}", ab.loss))?;
    let ft = RunConfig::parse_str("loss=focal_tversky\n").map_err(err)?;
    let ft = RunConfig::parse_str(&ft.to_text()).map_err(err)?;
    ensure(ft.loss == LossKind::FocalTversky(TverskyParams { alpha: 0.01, beta: 0.95, gamma: 1.5 }), format!("{:?}", ft.loss))?;
    let g: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 4))).collect();
    let s: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 8))).collect();
    let v = losses::focal_tversky_loss(&s, &g, TverskyParams::default()).map_err(err)?.value;
    let tp: f64 = 4.0;
    let ti = tp / (tp + 0.95 * 4.0);
    ensure((ti - 0.5128).abs() < 1e-3, format!("TI {ti}"))?;
    ensure((v - 0.3401).abs() < 1e-3, format!("loss {v}"))?;
    Ok(format!("weights (0.9, 0.1), constants (0.01, 0.95, 1.5), TI={ti:.4} loss={v:.4}"))
}

fn c11_toy_training() -> Outcome {
    let dir = work_dir();
    let data = dir.join("phantoms");
    let _ = std::fs::remove_dir_all(&data);
    generate_dataset(&PhantomParams { seed: 42, ..PhantomParams::default() }, 30, &data).map_err(err)?;
    let manifest = Manifest::read(&data.join("manifest.csv")).map_err(err)?;
    let test = SliceSet::load(&manifest, Split::Test).map_err(err)?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (variant, epochs, min_dsc, max_hd) in [(Variant::KloNet, 2, 0.90, Some(3.0)), (Variant::Csp, 1, 0.85, None), (Variant::Attention, 1, 0.85, None)] {
        let text = format!(
            "variant={}\nloss=ablation\noptimizer=adam\nlr=0.001\nbatch_size=4\nepochs={epochs}\nseed=42\ndata_dir={}\nout_dir={}\n",
            variant.name(),
            data.display(),
            dir.join(format!("run_{}", variant.name())).display()
        );
        let cfg = RunConfig::parse_str(&text).map_err(err)?;
        let outcome = train::train(&cfg, |_| {}).map_err(err)?;
        let report = train::evaluate_set(&outcome.model, &test, 4, Hd95Mode::MaxOfDirected).map_err(err)?;
        let dsc = report.dataset.dsc;
        let hd = report.dataset.hd95.unwrap_or(f64::INFINITY);
        parts.push(format!("{variant} DSC={dsc:.4} HD95={hd:.3}"));
        if dsc < min_dsc || max_hd.is_some_and(|m| hd > m) {
            failures.push(format!("{variant} DSC={dsc:.4} HD95={hd:.3}"));
        }
    }
    ensure(failures.is_empty(), failures.join(", "))?;
    Ok(parts.join("; "))
}

fn c12_complexity() -> Outcome {
    let rows = bench::bench_attention(&[64, 256, 1024], &[4, 16, 64], &BenchOptions::default()).map_err(err)?;
    bench::check_scaling(&rows).map_err(err)?;
    let at = |n, k| rows.iter().find(|r| r.n == n && r.k == k).expect("row");
    ensure(at(1024, 4).dense.similarity == 16 * at(256, 4).dense.similarity, "similarity not x16")?;
    ensure(at(1024, 16).sparse.aggregation == 4 * at(1024, 4).sparse.aggregation, "aggregation not linear")?;
    let path = work_dir().join("bench_attn.csv");
    bench::write_csv(&rows, &path).map_err(err)?;
    ensure(path.exists(), "bench CSV missing")?;
    let r = at(1024, 4);
    Ok(format!(
        "similarity x16, aggregation linear in k; N=1024 k=4 sparse core {:.2} ms vs dense core {:.2} ms; CSV {}",
        r.sparse_core_ms,
        r.dense_core_ms,
        path.display()
    ))
}

fn main() {
    exec::init_threads(None);
    let criteria: [(&str, fn() -> Outcome, Option<f64>); 12] = [
        ("parameter counts", c1_parameter_counts, Some(1.0)),
        ("vanilla U-Net reference", c2_vanilla, Some(1.0)),
        ("FLOP ratio", c3_flop_ratio, Some(1.0)),
        ("model size", c4_model_size, None),
        ("dense oracle equivalence", c5_dense_oracle, Some(30.0)),
        ("gradient suite", c6_gradient_suite, Some(300.0)),
        ("sparsity invariants", c7_sparsity, None),
        ("hard-selection gradient", c8_hard_selection, None),
        ("metric oracles", c9_metric_oracles, None),
        ("loss fixtures", c10_loss_fixtures, None),
        ("toy end-to-end training", c11_toy_training, Some(900.0)),
        ("complexity counters", c12_complexity, None),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut outcome = f();
        let secs = t.elapsed().as_secs_f64();
        if let (Ok(msg), Some(b)) = (&outcome, budget) {
            if secs > *b {
                outcome = Err(format!("{msg}; took {secs:.1}s, budget {b}s"));
            }
        }
        match outcome {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} ({secs:.2}s)", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
