use rand::Rng;

use crate::error::Result;
use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::nn::session::{BnUpdate, Session};
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

/// Square-kernel convolution.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_kaiming(format!("{name}.weight"), Shape::new(cout, cin, kernel, kernel), rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(Shape::new(cout, 1, 1, 1))));
        Conv { weight, bias, cin, cout, kernel, pad }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let b = self.bias.map(|b| s.param(b)).transpose()?;
        s.tape.conv2d(x, w, b, 1, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = Shape::new(channels, 1, 1, 1);
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::full(shape, 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(shape)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(shape)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(shape, 1.0)),
            channels,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma)?;
        let beta = s.param(self.beta)?;
        if s.training() {
            let (y, batch_mean, batch_var) = s.tape.batchnorm_train(x, gamma, beta)?;
            s.record_bn(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean,
                batch_var,
            });
            Ok(y)
        } else {
            let store = s.store();
            let (rm, rv) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
            s.tape.batchnorm_eval(x, gamma, beta, rm, rv)
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Conv, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        conv_bias: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, kernel, kernel / 2, conv_bias, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Two 3x3 Conv-BN-ReLU layers: `cin -> mid -> cout`.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl DoubleConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        conv_bias: bool,
        rng: &mut R,
    ) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(store, &format!("{name}.conv1"), cin, mid, 3, conv_bias, rng),
            second: ConvBnRelu::new(store, &format!("{name}.conv2"), mid, cout, 3, conv_bias, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.first.forward(s, x)?;
        self.second.forward(s, y)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    /// Closed-form count for a double conv with the given widths.
    pub fn count(cin: usize, mid: usize, cout: usize, conv_bias: bool) -> usize {
        let b = usize::from(conv_bias);
        9 * cin * mid + b * mid + 2 * mid + 9 * mid * cout + b * cout + 2 * cout
    }
}
