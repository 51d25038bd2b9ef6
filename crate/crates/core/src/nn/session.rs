use std::collections::HashMap;

use crate::error::Result;
use crate::nn::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into its running buffers once the step completes.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward pass: a fresh tape plus lazily registered parameter leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<ParamId, Var>,
    training: bool,
    track_params: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    /// `training` selects batch statistics in batch norm; parameters are
    /// registered with gradient tracking in training mode only.
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Session { tape: Tape::new(), store, vars: HashMap::new(), training, track_params: training, bn_updates: Vec::new() }
    }

    /// Override whether parameter leaves track gradients.
    pub fn with_param_grads(mut self, track: bool) -> Self {
        self.track_params = track;
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars.get(&id) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.track_params)?;
        self.vars.insert(id, v);
        Ok(v)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    pub fn input(&mut self, x: Tensor, requires_grad: bool) -> Result<Var> {
        self.tape.leaf(x, requires_grad)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient for every parameter touched by the forward pass, in id order.
    /// Untouched-by-gradient parameters report zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self.vars.iter().map(|(&id, &v)| (id, self.tape.grad_or_zeros(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl ParamStore {
    /// Fold batch statistics into running buffers with momentum 0.1.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = crate::ops::norm::BN_MOMENTUM;
        for u in updates {
            for (r, b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}
