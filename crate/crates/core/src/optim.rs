//! First-order optimisers over a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    first: HashMap<ParamId, Vec<f64>>,
    second: HashMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer { kind, lr, step: 0, first: HashMap::new(), second: HashMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are applied in the order given, so the result
    /// is deterministic for a deterministic gradient list.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (id, g) in grads {
            if !store.param(*id).kind.trainable() {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: format!("gradient of {}", store.param(*id).name) });
            }
            let n = g.numel();
            let w = store.get_mut(*id).data_mut();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(*id).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(*id).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((wi, gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *wi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let m = self.first.entry(*id).or_insert_with(|| vec![0.0; n]);
                    for ((wi, gi), mi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *wi -= self.lr * *mi;
                    }
                }
            }
        }
        Ok(())
    }
}
