//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and the data its
//! backward rule needs. Nodes are created in execution order, so the record
//! is topologically sorted by construction and `backward` is a single
//! reverse sweep. Gradients accumulate additively across fan-out.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, sparse::Selection};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, training: bool },
    SoftmaxRows { x: Var },
    SoftmaxChannels { x: Var },
    ToHeads { x: Var },
    FromHeads { x: Var },
    MatMulNt { a: Var, b: Var, scale: f64 },
    MatMulNn { a: Var, b: Var },
    MaskedAggregate { s: Var, v: Var, sel: Arc<Selection>, weights: Vec<f64> },
    StraightThrough { o: Var, tau: Var },
    WeightedSum { x: Var, weights: Option<Vec<f64>> },
    /// Scalar output whose gradient with respect to `x` was computed eagerly.
    Local { x: Var, grad: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample { .. } => "bilinear_upsample2x",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::ToHeads { .. } => "to_heads",
            Op::FromHeads { .. } => "from_heads",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::MatMulNn { .. } => "matmul_nn",
            Op::MaskedAggregate { .. } => "masked_softmax_aggregate",
            Op::StraightThrough { .. } => "straight_through",
            Op::WeightedSum { .. } => "sum",
            Op::Local { .. } => "local",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. }
            | Op::Upsample { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::SoftmaxRows { x }
            | Op::SoftmaxChannels { x }
            | Op::ToHeads { x }
            | Op::FromHeads { x }
            | Op::WeightedSum { x, .. }
            | Op::Local { x, .. } => vec![x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Add { a, b } | Op::Concat { a, b } | Op::MatMulNt { a, b, .. } | Op::MatMulNn { a, b } => {
                vec![a, b]
            }
            Op::MaskedAggregate { s, v, .. } => vec![s, v],
            Op::StraightThrough { o, tau } => vec![o, tau],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn scalar_shape() -> Shape {
    Shape::new(1, 1, 1, 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input tensor. Gradients are tracked only for leaves
    /// created with `requires_grad` and everything derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Hash of every discrete branch taken in the forward pass: ReLU
    /// signs, max-pool winners and attention key selections. Two passes
    /// with equal signatures differentiate through the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::MaskedAggregate { sel, .. } => {
                    i.hash(&mut h);
                    sel.indices().hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when no
    /// gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`], with zeros standing in for "no gradient".
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::pool::forward(self.value(x))?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample::forward(self.value(x));
        self.push(y, Op::Upsample { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::elementwise::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::elementwise::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add: {} vs {}", self.shape(a), self.shape(b))));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::shape::concat_channels(self.value(a), self.value(b))?;
        self.push(y, Op::Concat { a, b })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::shape::slice_channels(self.value(x), start, len)?;
        self.push(y, Op::SliceChannels { x, start })
    }

    /// Training-mode batch norm: returns the output and the batch mean and
    /// unbiased variance for the caller's running-statistics update.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check_bn_params(x, gamma, beta)?;
        let out = ops::norm::forward_train(self.value(x), self.value(gamma).data(), self.value(beta).data());
        let y = self.push(out.y, Op::BatchNorm { x, gamma, beta, xhat: out.xhat, invstd: out.invstd, training: true })?;
        Ok((y, out.mean, out.var_unbiased))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Result<Var> {
        self.check_bn_params(x, gamma, beta)?;
        let (y, xhat, invstd) = ops::norm::forward_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
        );
        self.push(y, Op::BatchNorm { x, gamma, beta, xhat, invstd, training: false })
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.shape(x).c();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("batchnorm affine parameters do not match {} channels", c)));
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax::rows(self.value(x));
        self.push(y, Op::SoftmaxRows { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax::channels(self.value(x));
        self.push(y, Op::SoftmaxChannels { x })
    }

    pub fn to_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let y = ops::shape::to_heads(self.value(x), heads)?;
        self.push(y, Op::ToHeads { x })
    }

    pub fn from_heads(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::shape::from_heads(self.value(x), h, w)?;
        self.push(y, Op::FromHeads { x })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let y = ops::matmul::nt(self.value(a), self.value(b), scale)?;
        self.push(y, Op::MatMulNt { a, b, scale })
    }

    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul::nn(self.value(a), self.value(b))?;
        self.push(y, Op::MatMulNn { a, b })
    }

    /// Masked softmax over the selected entries of each score row followed
    /// by aggregation of the corresponding value rows. Also returns the
    /// per-selection attention weights.
    pub fn masked_aggregate(&mut self, s: Var, v: Var, sel: Arc<Selection>) -> Result<(Var, Vec<f64>)> {
        let (y, weights) = ops::sparse::forward(self.value(s), self.value(v), &sel)?;
        let w = weights.clone();
        Ok((self.push(y, Op::MaskedAggregate { s, v, sel, weights })?, w))
    }

    /// Identity on `o` `[B, h, N, d]` in value; routes `g * o / tau` into the
    /// per-position `tau` `[B, 1, H, W]` on the way back.
    pub fn straight_through(&mut self, o: Var, tau: Var) -> Result<Var> {
        let (so, st) = (self.shape(o), self.shape(tau));
        if so.b() != st.b() || st.c() != 1 || so.h() != st.plane() {
            return Err(Error::Shape(format!("straight_through: output {so} vs tau {st}")));
        }
        let y = self.value(o).clone();
        self.push(y, Op::StraightThrough { o, tau })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::full(scalar_shape(), total), Op::WeightedSum { x, weights: None })
    }

    /// `sum(x * weights)`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape("weighted_sum: weight length mismatch".into()));
        }
        let total = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::full(scalar_shape(), total), Op::WeightedSum { x, weights: Some(weights) })
    }

    /// Scalar node with a caller-supplied value and gradient with respect to `x`.
    pub fn local_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::Shape("local_scalar: gradient length mismatch".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "local".into() });
        }
        self.push(Tensor::full(scalar_shape(), value), Op::Local { x, grad })
    }

    /// Seed `root` with ones and propagate gradients to every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            for (input, g) in self.backward_node(i, &gy) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let need_b = b.is_some_and(need);
                let (dx, dw, db) = ops::conv::backward(val(x), val(w), stride, pad, gy, need(x), need(w), need_b);
                out.extend(dx.map(|g| (x, g)));
                out.extend(dw.map(|g| (w, g)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((b, db.reshape(val(b).shape()).expect("bias shape")));
                }
            }
            Op::MaxPool { x, argmax } => out.push((*x, ops::pool::backward(val(*x).shape(), argmax, gy))),
            &Op::Upsample { x } => out.push((x, ops::upsample::backward(val(x).shape(), gy))),
            &Op::Relu { x } => out.push((x, ops::elementwise::relu_backward(val(x), gy))),
            &Op::Sigmoid { x } => {
                out.push((x, ops::elementwise::sigmoid_backward(&self.nodes[i].value, gy)))
            }
            &Op::Add { a, b } => {
                out.push((a, gy.clone()));
                out.push((b, gy.clone()));
            }
            &Op::Scale { x, factor } => {
                let mut g = gy.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
                out.push((x, g));
            }
            &Op::Concat { a, b } => {
                let ca = val(a).shape().c();
                let cb = val(b).shape().c();
                out.push((a, ops::shape::slice_channels(gy, 0, ca).expect("concat grad")));
                out.push((b, ops::shape::slice_channels(gy, ca, cb).expect("concat grad")));
            }
            &Op::SliceChannels { x, start } => {
                out.push((x, ops::shape::slice_channels_backward(val(x).shape(), start, gy)))
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, training } => {
                let (dx, dg, db) =
                    ops::norm::backward(val(*x).shape(), val(*gamma).data(), xhat, invstd, *training, gy);
                out.push((*x, dx));
                let ps = val(*gamma).shape();
                out.push((*gamma, Tensor::from_vec(ps, dg).expect("gamma grad")));
                out.push((*beta, Tensor::from_vec(ps, db).expect("beta grad")));
            }
            &Op::SoftmaxRows { x } => {
                out.push((x, ops::softmax::rows_backward(&self.nodes[i].value, gy)))
            }
            &Op::SoftmaxChannels { x } => {
                out.push((x, ops::softmax::channels_backward(&self.nodes[i].value, gy)))
            }
            &Op::ToHeads { x } => {
                let s = val(x).shape();
                out.push((x, ops::shape::from_heads(gy, s.h(), s.w()).expect("heads grad")));
            }
            &Op::FromHeads { x } => {
                let heads = val(x).shape().c();
                out.push((x, ops::shape::to_heads(gy, heads).expect("heads grad")));
            }
            &Op::MatMulNt { a, b, scale } => {
                let (da, db) = ops::matmul::nt_backward(val(a), val(b), scale, gy);
                out.push((a, da));
                out.push((b, db));
            }
            &Op::MatMulNn { a, b } => {
                let (da, db) = ops::matmul::nn_backward(val(a), val(b), gy);
                out.push((a, da));
                out.push((b, db));
            }
            Op::MaskedAggregate { s, v, sel, weights } => {
                let (ds, dv) = ops::sparse::backward(val(*s).shape(), val(*v), sel, weights, gy);
                out.push((*s, ds));
                out.push((*v, dv));
            }
            &Op::StraightThrough { o, tau } => {
                out.push((o, gy.clone()));
                if need(tau) {
                    let so = val(o).shape();
                    let (heads, n, d) = (so.c(), so.h(), so.w());
                    let (od, gd, td) = (val(o).data(), gy.data(), val(tau).data());
                    let mut dt = Tensor::zeros(val(tau).shape());
                    for b in 0..so.b() {
                        for h in 0..heads {
                            for p in 0..n {
                                let r = ((b * heads + h) * n + p) * d;
                                let dot: f64 = od[r..r + d].iter().zip(&gd[r..r + d]).map(|(a, c)| a * c).sum();
                                dt.data_mut()[b * n + p] += dot / td[b * n + p];
                            }
                        }
                    }
                    out.push((tau, dt));
                }
            }
            Op::WeightedSum { x, weights } => {
                let g = gy.data()[0];
                let s = val(*x).shape();
                let t = match weights {
                    None => Tensor::full(s, g),
                    Some(w) => Tensor::from_vec(s, w.iter().map(|v| v * g).collect()).expect("sum grad"),
                };
                out.push((*x, t));
            }
            Op::Local { x, grad } => {
                let g = gy.data()[0];
                let t = Tensor::from_vec(val(*x).shape(), grad.iter().map(|v| v * g).collect()).expect("local grad");
                out.push((*x, t));
            }
        }
        out.retain(|(v, _)| need(*v));
        out
    }
}
