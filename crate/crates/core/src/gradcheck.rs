//! Central-difference gradient checking for tape operations, losses and
//! composed modules.
//!
//! The checked scalar is `sum(w * f(x))` with fixed random weights `w`.
//! Error per input is `max|a - n| / max(max|a|, max|n|, ERROR_FLOOR)` over
//! the checked coordinates, where `a` is the tape gradient and `n` the
//! central difference with step [`STEP`].

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, DynamicKnnAttention, GatingNet};
use crate::csp::{CspBlock, CspOptions};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::BinaryMask;
use crate::model::{Model, ModelSpec};
use crate::nn::{ConvBnRelu, DoubleConv, ParamId, ParamStore, Session};
use crate::ops::sparse::Selection;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
/// Step for deep composed networks, where the summed output is large
/// relative to individual parameter gradients and a smaller step loses
/// the difference to cancellation.
pub const DEEP_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor so that exactly-zero gradients compare cleanly.
pub const ERROR_FLOOR: f64 = 1e-7;
/// Minimum gap between the k-th and (k+1)-th score of every attention row,
/// and between `tau * k_max` and the nearest integer, in attention fixtures.
pub const TIE_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error per checked input.
    pub inputs: Vec<(String, f64)>,
    pub coordinates: usize,
    /// Probes dropped because the perturbation changed a discrete branch.
    pub skipped: usize,
}

impl CheckResult {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= TOLERANCE
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(ERROR_FLOOR, f64::max);
    diff / scale
}

fn weights_for(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Coordinates to probe: all of them, or a seeded sample of `limit`.
fn coordinates(n: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(l) = limit {
        if l < n {
            idx.shuffle(rng);
            idx.truncate(l);
            idx.sort_unstable();
        }
    }
    idx
}

/// Check a function built from raw tape operations against every
/// coordinate of every input.
pub fn check_tape<F>(name: &str, inputs: &[Tensor], seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], weights: Option<&[f64]>| -> Result<(f64, usize)> {
        let mut t = Tape::new();
        let vars = vals.iter().map(|v| t.leaf(v.clone(), false)).collect::<Result<Vec<_>>>()?;
        let y = f(&mut t, &vars)?;
        let n = t.value(y).numel();
        let total = match weights {
            Some(w) => t.value(y).data().iter().zip(w).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((total, n))
    };
    let (_, n_out) = eval(inputs, None)?;
    let w = weights_for(n_out, seed);
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect::<Result<Vec<_>>>()?;
    let y = f(&mut tape, &vars)?;
    let root = tape.weighted_sum(y, w.clone())?;
    tape.backward(root);
    let mut result = CheckResult { name: name.to_string(), inputs: Vec::new(), coordinates: 0, skipped: 0 };
    let mut vals = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + STEP;
            let plus = eval(&vals, Some(&w))?.0;
            vals[i].data_mut()[j] = orig - STEP;
            let minus = eval(&vals, Some(&w))?.0;
            vals[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        result.coordinates += numeric.len();
        result.inputs.push((format!("input{i}"), relative_error(analytic.data(), &numeric)));
    }
    Ok(result)
}

/// Check a scalar function of a flat vector with a caller-supplied
/// gradient.
pub fn check_scalar<F>(name: &str, x: &[f64], f: F) -> Result<CheckResult>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    let mut xs = x.to_vec();
    let mut numeric = vec![0.0; x.len()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        xs[j] = x[j] + STEP;
        let plus = f(&xs)?.0;
        xs[j] = x[j] - STEP;
        let minus = f(&xs)?.0;
        xs[j] = x[j];
        *slot = (plus - minus) / (2.0 * STEP);
    }
    Ok(CheckResult {
        name: name.to_string(),
        inputs: vec![("s".into(), relative_error(&analytic, &numeric))],
        coordinates: x.len(),
        skipped: 0,
    })
}

/// Finite-difference step and per-tensor coordinate budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub step: f64,
    pub limit: Option<usize>,
}

impl Default for Probe {
    fn default() -> Self {
        Probe { step: STEP, limit: Some(12) }
    }
}

/// Check a module forward with respect to its input and every trainable
/// parameter, probing at most `limit` coordinates per tensor. Probes whose
/// perturbation flips a ReLU, max-pool or top-k decision are skipped.
pub fn check_module<F>(
    name: &str,
    store: &ParamStore,
    x: &Tensor,
    training: bool,
    probe: Probe,
    seed: u64,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Session, Var) -> Result<Var>,
{
    let eval = |st: &ParamStore, xv: &Tensor, weights: &[f64]| -> Result<(f64, u64)> {
        let mut s = Session::new(st, training).with_param_grads(false);
        let xi = s.input(xv.clone(), false)?;
        let y = f(&mut s, xi)?;
        let total = s.tape.value(y).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok((total, s.tape.branch_signature()))
    };
    let (w, grads, gx, base) = {
        let mut s = Session::new(store, training).with_param_grads(true);
        let xi = s.input(x.clone(), true)?;
        let y = f(&mut s, xi)?;
        let w = weights_for(s.tape.value(y).numel(), seed);
        let root = s.tape.weighted_sum(y, w.clone())?;
        s.tape.backward(root);
        (w, s.param_grads(), s.tape.grad_or_zeros(xi), s.tape.branch_signature())
    };
    let (step, limit) = (probe.step, probe.limit);
    // Central difference at one coordinate, or `None` across a kink.
    let probe = |plus: (f64, u64), minus: (f64, u64)| {
        (plus.1 == base && minus.1 == base).then(|| (plus.0 - minus.0) / (2.0 * step))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = CheckResult { name: name.to_string(), inputs: Vec::new(), coordinates: 0, skipped: 0 };

    let mut xv = x.clone();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for j in coordinates(x.numel(), limit, &mut rng) {
        let orig = xv.data()[j];
        xv.data_mut()[j] = orig + step;
        let plus = eval(store, &xv, &w)?;
        xv.data_mut()[j] = orig - step;
        let minus = eval(store, &xv, &w)?;
        xv.data_mut()[j] = orig;
        match probe(plus, minus) {
            Some(n) => {
                analytic.push(gx.data()[j]);
                numeric.push(n);
            }
            None => result.skipped += 1,
        }
    }
    result.coordinates += numeric.len();
    result.inputs.push(("input".into(), relative_error(&analytic, &numeric)));

    let mut st = store.clone();
    for (id, g) in grads {
        if !store.param(id).kind.trainable() {
            continue;
        }
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for j in coordinates(g.numel(), limit, &mut rng) {
            let orig = st.get(id).data()[j];
            st.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&st, x, &w)?;
            st.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&st, x, &w)?;
            st.get_mut(id).data_mut()[j] = orig;
            match probe(plus, minus) {
                Some(n) => {
                    analytic.push(g.data()[j]);
                    numeric.push(n);
                }
                None => result.skipped += 1,
            }
        }
        result.coordinates += numeric.len();
        result.inputs.push((store.param(id).name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(result)
}

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values of `shape` that are pairwise at least `1 / numel` apart, shuffled.
fn distinct_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("shape matches")
}

/// Random values bounded away from zero, for kinked functions.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let v = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape matches")
}

/// Nudge every trainable parameter so biases and affine terms are not at
/// their special initial values.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids = store.trainable_ids();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// Smallest gap, over every row, between the k-th and (k+1)-th largest
/// score, and between `tau * k_max` and the nearest integer.
pub fn attention_margin(module: &DynamicKnnAttention, store: &ParamStore, x: &Tensor) -> Result<f64> {
    let mut s = Session::new(store, true).with_param_grads(false);
    let xi = s.input(x.clone(), false)?;
    let (_, state) = module.forward_with_state(&mut s, xi, true)?;
    let state = state.expect("state requested");
    let sh = state.scores.shape();
    let n = sh.h();
    let mut margin = f64::INFINITY;
    for (row_idx, row) in state.scores.data().chunks(n).enumerate() {
        let b = row_idx / (sh.c() * n);
        let k = state.k[b * n + row_idx % n];
        if k < n {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(sorted[k - 1] - sorted[k]);
        }
    }
    for t in state.tau.data() {
        let v = t * module.config.k_max as f64;
        margin = margin.min((v - v.round()).abs());
    }
    Ok(margin)
}

fn attention_fixture(
    cfg: AttentionConfig,
    channels: usize,
    side: usize,
    seed: u64,
) -> Result<(ParamStore, DynamicKnnAttention, Tensor)> {
    for attempt in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt * 7919));
        let mut store = ParamStore::new();
        let module = DynamicKnnAttention::new(&mut store, "att", channels, cfg, true, &mut rng)?;
        jitter(&mut store, &mut rng);
        let x = rand_tensor(Shape::new(2, channels, side, side), &mut rng);
        if attention_margin(&module, &store, &x)? > TIE_MARGIN {
            return Ok((store, module, x));
        }
    }
    Err(Error::Numerical("no tie-free attention fixture found".into()))
}

/// Every tape operation, loss and composed module, checked at `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let s = |b, c, h, w| Shape::new(b, c, h, w);

    let x = rand_tensor(s(2, 3, 5, 5), r);
    let w = rand_tensor(s(4, 3, 3, 3), r);
    let b = rand_tensor(s(4, 1, 1, 1), r);
    out.push(check_tape("conv2d", &[x.clone(), w.clone(), b], seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))?);
    out.push(check_tape("conv2d_stride2", &[x, w], seed, |t, v| t.conv2d(v[0], v[1], None, 2, 0))?);
    let w1 = rand_tensor(s(3, 3, 1, 1), r);
    out.push(check_tape("conv2d_1x1", &[rand_tensor(s(2, 3, 4, 4), r), w1], seed, |t, v| t.conv2d(v[0], v[1], None, 1, 0))?);
    out.push(check_tape("maxpool2x2", &[distinct_tensor(s(2, 2, 4, 6), r)], seed, |t, v| t.maxpool2x2(v[0]))?);
    out.push(check_tape("upsample2x", &[rand_tensor(s(2, 2, 3, 4), r)], seed, |t, v| t.upsample2x(v[0]))?);
    out.push(check_tape("relu", &[away_from_zero(s(2, 2, 3, 3), r)], seed, |t, v| t.relu(v[0]))?);
    out.push(check_tape("sigmoid", &[rand_tensor(s(2, 2, 3, 3), r)], seed, |t, v| t.sigmoid(v[0]))?);
    let (a, bb) = (rand_tensor(s(2, 2, 3, 3), r), rand_tensor(s(2, 2, 3, 3), r));
    out.push(check_tape("add", &[a.clone(), bb.clone()], seed, |t, v| t.add(v[0], v[1]))?);
    out.push(check_tape("scale", std::slice::from_ref(&a), seed, |t, v| t.scale(v[0], -1.7))?);
    let c3 = rand_tensor(s(2, 3, 3, 3), r);
    out.push(check_tape("concat_channels", &[a.clone(), c3.clone()], seed, |t, v| t.concat_channels(v[0], v[1]))?);
    out.push(check_tape("slice_channels", &[c3], seed, |t, v| t.slice_channels(v[0], 1, 2))?);
    let xb = rand_tensor(s(3, 2, 3, 3), r);
    let gamma = rand_tensor(s(2, 1, 1, 1), r);
    let beta = rand_tensor(s(2, 1, 1, 1), r);
    out.push(check_tape("batchnorm_train", &[xb.clone(), gamma.clone(), beta.clone()], seed, |t, v| {
        Ok(t.batchnorm_train(v[0], v[1], v[2])?.0)
    })?);
    let (rm, rv) = ([0.1, -0.2], [0.8, 1.3]);
    out.push(check_tape("batchnorm_eval", &[xb, gamma, beta], seed, move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv))?);
    out.push(check_tape("softmax_rows", &[rand_tensor(s(2, 2, 3, 5), r)], seed, |t, v| t.softmax_rows(v[0]))?);
    out.push(check_tape("softmax_channels", &[rand_tensor(s(2, 3, 2, 2), r)], seed, |t, v| t.softmax_channels(v[0]))?);
    out.push(check_tape("to_heads", &[rand_tensor(s(2, 4, 2, 3), r)], seed, |t, v| t.to_heads(v[0], 2))?);
    out.push(check_tape("from_heads", &[rand_tensor(s(2, 2, 6, 2), r)], seed, |t, v| t.from_heads(v[0], 2, 3))?);
    let (q, k) = (rand_tensor(s(2, 2, 4, 3), r), rand_tensor(s(2, 2, 5, 3), r));
    out.push(check_tape("matmul_nt", &[q, k], seed, |t, v| t.matmul_nt(v[0], v[1], 0.7))?);
    let (m1, m2) = (rand_tensor(s(2, 2, 4, 5), r), rand_tensor(s(2, 2, 5, 3), r));
    out.push(check_tape("matmul_nn", &[m1, m2], seed, |t, v| t.matmul_nn(v[0], v[1]))?);
    let scores = rand_tensor(s(2, 2, 6, 6), r);
    let kq: Vec<usize> = (0..12).map(|i| 1 + i % 6).collect();
    let sel = Arc::new(Selection::top_k(&scores, &kq)?);
    let vals = rand_tensor(s(2, 2, 6, 3), r);
    out.push(check_tape("masked_aggregate", &[scores, vals], seed, move |t, v| {
        Ok(t.masked_aggregate(v[0], v[1], Arc::clone(&sel))?.0)
    })?);
    let ws: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
    out.push(check_tape("weighted_sum", &[a], seed, move |t, v| t.weighted_sum(v[0], ws.clone()))?);

    out.extend(loss_checks(r)?);
    out.extend(module_checks(seed, r)?);
    Ok(out)
}

fn loss_checks(r: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (h, w) = (6, 6);
    let mask = BinaryMask::from_fn(h, w, |y, x| (1..4).contains(&y) && (2..5).contains(&x));
    let g = mask.to_f64();
    let phi = losses::signed_distance(&mask).expect("mixed mask");
    let s: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.05..0.95)).collect();
    let mut out = Vec::new();
    out.push(check_scalar("dice_loss", &s, |x| losses::dice_loss(x, &g).map(|l| (l.value, l.grad)))?);
    out.push(check_scalar("boundary_loss", &s, |x| losses::boundary_loss(x, &phi).map(|l| (l.value, l.grad)))?);
    out.push(check_scalar("ablation_loss", &s, |x| {
        losses::ablation_loss(x, &g, &phi, losses::LossWeights::default()).map(|l| (l.value, l.grad))
    })?);
    out.push(check_scalar("focal_tversky_loss", &s, |x| {
        losses::focal_tversky_loss(x, &g, losses::TverskyParams::default()).map(|l| (l.value, l.grad))
    })?);
    let logits = rand_tensor(Shape::new(1, 2, h, w), r);
    let kind = losses::LossKind::default();
    out.push(check_tape("loss_on_logits", &[logits], 3, move |t, v| {
        let p = t.softmax_channels(v[0])?;
        let fg = t.slice_channels(p, 1, 1)?;
        let lv = kind.evaluate(t.value(fg).data(), &g, &phi)?;
        t.local_scalar(fg, lv.value, lv.grad)
    })?);
    Ok(out)
}

fn module_checks(seed: u64, r: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let probe = Probe::default();

    let mut store = ParamStore::new();
    let cbr = ConvBnRelu::new(&mut store, "cbr", 2, 3, 3, false, r);
    jitter(&mut store, r);
    let x = rand_tensor(Shape::new(2, 2, 4, 4), r);
    out.push(check_module("conv_bn_relu", &store, &x, true, probe, seed, |s, x| cbr.forward(s, x))?);

    let mut store = ParamStore::new();
    let dc = DoubleConv::new(&mut store, "dc", 2, 3, 3, false, r);
    jitter(&mut store, r);
    out.push(check_module("double_conv", &store, &x, true, probe, seed, |s, x| dc.forward(s, x))?);
    out.push(check_module("double_conv_eval", &store, &x, false, probe, seed, |s, x| dc.forward(s, x))?);

    let mut store = ParamStore::new();
    let opts = CspOptions { bottleneck_residual: true, ..CspOptions::default() };
    let csp = CspBlock::new(&mut store, "csp", 2, 4, 2, opts, r)?;
    jitter(&mut store, r);
    out.push(check_module("csp_block", &store, &x, true, probe, seed, |s, x| csp.forward(s, x))?);

    let mut store = ParamStore::new();
    let gate = GatingNet::new(&mut store, "gate", 8, true, r);
    jitter(&mut store, r);
    let xg = rand_tensor(Shape::new(2, 8, 3, 3), r);
    out.push(check_module("gating_net", &store, &xg, true, probe, seed, |s, x| gate.predict_tau(s, x))?);

    let cfg = AttentionConfig { heads: 2, k_min: 2, k_max: 8, straight_through: false, residual: true };
    let (store, att, xa) = attention_fixture(cfg, 8, 4, seed)?;
    out.push(check_module("dynamic_knn_attention", &store, &xa, true, probe, seed, |s, x| att.forward(s, x))?);
    out.push(check_module("dense_attention", &store, &xa, true, probe, seed, |s, x| att.dense_forward(s, x))?);

    let mut spec = ModelSpec { channels: vec![4, 8, 16, 32, 64], csp_depth: 1, ..ModelSpec::default() };
    spec.attention.heads = 2;
    let mut model = Model::build(&spec, seed)?;
    jitter(&mut model.store, r);
    let xm = rand_tensor(Shape::new(2, 1, 32, 32), r);
    out.push(check_module("klonet_model", &model.store, &xm, true, Probe { step: DEEP_STEP, limit: Some(4) }, seed, |s, x| model.forward(s, x))?);
    Ok(out)
}

/// Parameter ids whose gradient is exactly zero after one task-loss
/// backward through `model`.
pub fn zero_grad_params(model: &Model, x: &Tensor, target: &[f64]) -> Result<Vec<ParamId>> {
    let mut s = Session::new(&model.store, true);
    let xi = s.input(x.clone(), false)?;
    let logits = model.forward(&mut s, xi)?;
    let phi = vec![0.0; target.len()];
    let (loss, _) = losses::loss_on_logits(&mut s, logits, target, &phi, &losses::LossKind::default())?;
    s.tape.backward(loss);
    Ok(s.param_grads().into_iter().filter(|(_, g)| g.data().iter().all(|&v| v == 0.0)).map(|(id, _)| id).collect())
}
