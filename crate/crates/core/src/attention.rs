//! Dynamic K-nearest-neighbour attention.
//!
//! Each spatial position gets its own neighbour budget. A small gating
//! network predicts a density score `tau` in (0, 1) per position, which maps
//! to a key count `k = max(k_min, min(k_max, floor(tau * k_max)))`. Every
//! query then attends, via a softmax restricted to its selected keys, to
//! the `k` keys with the highest scaled dot-product similarity. The count
//! is shared across heads.
//!
//! The full score matrix is materialised before selection, so similarity
//! cost stays quadratic in the number of positions. Only the softmax and
//! value aggregation scale with the selected count.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore, Session};
use crate::ops::sparse::Selection;
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Route a gradient into `tau` by scaling each attention output row by
    /// `tau / stop_gradient(tau)`. Off by default: the hard top-k selection
    /// leaves the gating network without a task-loss gradient.
    pub straight_through: bool,
    /// Add the input back onto the projected attention output.
    pub residual: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { heads: 4, k_min: 4, k_max: 64, straight_through: false, residual: true }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{channels} channels not divisible by {} heads", self.heads)));
        }
        if channels < 4 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!("gating reduction needs channels divisible by 4, got {channels}")));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!("need 1 <= k_min <= k_max, got {} and {}", self.k_min, self.k_max)));
        }
        Ok(())
    }
}

/// Neighbour count for one density score.
pub fn dynamic_k(tau: f64, k_min: usize, k_max: usize) -> usize {
    let scaled = (tau * k_max as f64).floor().max(0.0) as usize;
    k_min.max(k_max.min(scaled))
}

/// [`dynamic_k`] applied to a `[B, 1, H, W]` density map, clamped to `N = H * W`.
pub fn k_map(tau: &Tensor, k_min: usize, k_max: usize) -> Vec<usize> {
    let n = tau.shape().plane();
    tau.data().iter().map(|&t| dynamic_k(t, k_min, k_max).min(n)).collect()
}

/// Scaled dot-product scores `q_i . k_j / sqrt(d_h)` for `[B, h, N, d_h]` inputs.
pub fn similarity(s: &mut Session, q: Var, k: Var) -> Result<Var> {
    let d = s.tape.shape(q).w();
    s.tape.matmul_nt(q, k, 1.0 / (d as f64).sqrt())
}

/// Two 1x1 convolutions `C -> C/4 -> 1` with a ReLU between them.
#[derive(Debug, Clone)]
pub struct GatingNet {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl GatingNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, bias: bool, rng: &mut R) -> Self {
        let reduced = channels / 4;
        GatingNet {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, reduced, 1, 0, bias, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), reduced, 1, 1, 0, bias, rng),
        }
    }

    /// `sigmoid(conv2(relu(conv1(x))))`, shape `[B, 1, H, W]`.
    pub fn predict_tau(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = self.conv1.forward(s, x)?;
        let g = s.tape.relu(g)?;
        let g = self.conv2.forward(s, g)?;
        s.tape.sigmoid(g)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    /// Weight-only count `C^2/4 + C/4`.
    pub fn weight_count(channels: usize) -> usize {
        channels * channels / 4 + channels / 4
    }
}

/// FLOPs of one attention forward, split by stage. Multiply-accumulates
/// count as two FLOPs; softmax and element-wise work as one per element.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub projection: u64,
    pub gating: u64,
    pub similarity: u64,
    pub softmax: u64,
    pub aggregation: u64,
    pub residual: u64,
}

impl AttentionFlops {
    /// `selected` is the number of selected (query, key) pairs per head,
    /// summed over the batch: `sum_i k_i`. Pass `None` for dense attention.
    pub fn compute(batch: usize, channels: usize, n: usize, config: &AttentionConfig, selected: Option<u64>) -> Self {
        let (b, c, n, h) = (batch as u64, channels as u64, n as u64, config.heads as u64);
        let d = c / h;
        let pairs = selected.unwrap_or(b * n * n);
        let r = c / 4;
        AttentionFlops {
            projection: 4 * 2 * b * c * c * n,
            gating: if selected.is_some() { 2 * b * c * r * n + b * r * n + 2 * b * r * n + b * n } else { 0 },
            similarity: 2 * b * h * n * n * d,
            softmax: h * pairs,
            aggregation: 2 * h * pairs * d,
            residual: if config.residual { b * c * n } else { 0 },
        }
    }

    pub fn total(&self) -> u64 {
        self.projection + self.gating + self.similarity + self.softmax + self.aggregation + self.residual
    }
}

/// Intermediate values of one dynamic attention forward.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// Similarity scores `[B, h, N, N]`.
    pub scores: Tensor,
    /// Density scores `[B, 1, H, W]`.
    pub tau: Tensor,
    /// Neighbour count per position, `B * N` entries.
    pub k: Vec<usize>,
    /// Binary selection mask `[B, h, N, N]`.
    pub mask: Tensor,
    /// Attention weights `[B, h, N, N]`, zero outside the mask.
    pub weights: Tensor,
    pub flops: AttentionFlops,
}

/// Multi-head self-attention over the positions of a `[B, C, H, W]` map
/// with a per-position neighbour budget.
#[derive(Debug, Clone)]
pub struct DynamicKnnAttention {
    pub channels: usize,
    pub config: AttentionConfig,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub proj: Conv,
    pub gate: GatingNet,
}

impl DynamicKnnAttention {
    /// Query/key/value projections carry no bias; the output projection and
    /// the gating convolutions do (gating biases switchable).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: AttentionConfig,
        gating_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(channels)?;
        let c = channels;
        Ok(DynamicKnnAttention {
            channels,
            config,
            query: Conv::new(store, &format!("{name}.q"), c, c, 1, 0, false, rng),
            key: Conv::new(store, &format!("{name}.k"), c, c, 1, 0, false, rng),
            value: Conv::new(store, &format!("{name}.v"), c, c, 1, 0, false, rng),
            proj: Conv::new(store, &format!("{name}.proj"), c, c, 1, 0, true, rng),
            gate: GatingNet::new(store, &format!("{name}.gate"), c, gating_bias, rng),
        })
    }

    /// Closed-form parameter count of a module at `channels`.
    pub fn count(channels: usize, gating_bias: bool) -> usize {
        let c = channels;
        let gb = usize::from(gating_bias);
        4 * c * c + c + GatingNet::weight_count(c) + gb * (c / 4 + 1)
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count() + self.proj.param_count() + self.gate.param_count()
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<Shape> {
        let shape = s.tape.shape(x);
        if shape.c() != self.channels {
            return Err(Error::Shape(format!("attention expects {} channels, got {shape}", self.channels)));
        }
        Ok(shape)
    }

    /// Q, K, V as `[B, h, N, d_h]`.
    pub fn project_qkv(&self, s: &mut Session, x: Var) -> Result<(Var, Var, Var)> {
        self.check_input(s, x)?;
        let heads = self.config.heads;
        let q = self.query.forward(s, x)?;
        let q = s.tape.to_heads(q, heads)?;
        let k = self.key.forward(s, x)?;
        let k = s.tape.to_heads(k, heads)?;
        let v = self.value.forward(s, x)?;
        let v = s.tape.to_heads(v, heads)?;
        Ok((q, k, v))
    }

    pub fn predict_tau(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.gate.predict_tau(s, x)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_with_state(s, x, false)?.0)
    }

    /// Full pipeline. With `want_state`, also returns dense copies of the
    /// scores, mask and weights for inspection.
    pub fn forward_with_state(&self, s: &mut Session, x: Var, want_state: bool) -> Result<(Var, Option<AttentionState>)> {
        let shape = self.check_input(s, x)?;
        let (q, k, v) = self.project_qkv(s, x)?;
        let scores = similarity(s, q, k)?;
        let tau = self.predict_tau(s, x)?;
        let k_per_query = k_map(s.tape.value(tau), self.config.k_min, self.config.k_max);
        let sel = Arc::new(Selection::top_k(s.tape.value(scores), &k_per_query)?);
        let (mut o, weights) = s.tape.masked_aggregate(scores, v, Arc::clone(&sel))?;
        if self.config.straight_through {
            o = s.tape.straight_through(o, tau)?;
        }
        let out = self.finish(s, x, o, shape)?;
        let state = want_state.then(|| {
            let score_shape = s.tape.shape(scores);
            let selected: u64 = k_per_query.iter().map(|&k| k as u64).sum();
            AttentionState {
                scores: s.tape.value(scores).clone(),
                tau: s.tape.value(tau).clone(),
                mask: sel.dense_mask(score_shape),
                weights: sel.scatter(score_shape, &weights),
                flops: AttentionFlops::compute(shape.b(), self.channels, shape.plane(), &self.config, Some(selected)),
                k: k_per_query,
            }
        });
        Ok((out, state))
    }

    /// Same projections with an unmasked softmax over all positions.
    pub fn dense_forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = self.check_input(s, x)?;
        let (q, k, v) = self.project_qkv(s, x)?;
        let scores = similarity(s, q, k)?;
        let a = s.tape.softmax_rows(scores)?;
        let o = s.tape.matmul_nn(a, v)?;
        self.finish(s, x, o, shape)
    }

    fn finish(&self, s: &mut Session, x: Var, o: Var, shape: Shape) -> Result<Var> {
        let o = s.tape.from_heads(o, shape.h(), shape.w())?;
        let y = self.proj.forward(s, o)?;
        if self.config.residual {
            s.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}
