//! Cross-stage-partial encoder block.
//!
//! Two parallel 1x1 projections split the input into `C_h = C_out / 2`
//! channel branches. The first runs through `n` bottlenecks (1x1 then 3x3),
//! the second is a lightweight shortcut. The branches are concatenated and
//! fused back to `C_out` by a final 1x1 convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, ParamStore, Session};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CspOptions {
    /// Give convolutions that feed a batch norm a bias term.
    pub conv_bias_before_bn: bool,
    /// Shortcut branch is a bare biased 1x1 conv instead of Conv-BN-ReLU.
    pub plain_shortcut: bool,
    /// Add each bottleneck's input to its output.
    pub bottleneck_residual: bool,
}

#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub reduce: ConvBnRelu,
    pub spatial: ConvBnRelu,
    pub residual: bool,
}

impl BottleneckBlock {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = self.spatial.forward(s, y)?;
        if self.residual {
            s.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Shortcut {
    Projected(ConvBnRelu),
    Plain(Conv),
}

#[derive(Debug, Clone)]
pub struct CspBlock {
    pub cin: usize,
    pub cout: usize,
    pub split1: ConvBnRelu,
    pub split2: Shortcut,
    pub bottlenecks: Vec<BottleneckBlock>,
    pub fuse: ConvBnRelu,
}

fn validate(cout: usize, depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Config("CSP depth must be at least 1".into()));
    }
    if cout < 2 || !cout.is_multiple_of(2) {
        return Err(Error::Config(format!("CSP output width must be even, got {cout}")));
    }
    Ok(())
}

impl CspBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
        opts: CspOptions,
        rng: &mut R,
    ) -> Result<Self> {
        validate(cout, depth)?;
        let ch = cout / 2;
        let bias = opts.conv_bias_before_bn;
        let split1 = ConvBnRelu::new(store, &format!("{name}.split1"), cin, ch, 1, bias, rng);
        let split2 = if opts.plain_shortcut {
            Shortcut::Plain(Conv::new(store, &format!("{name}.split2"), cin, ch, 1, 0, true, rng))
        } else {
            Shortcut::Projected(ConvBnRelu::new(store, &format!("{name}.split2"), cin, ch, 1, bias, rng))
        };
        let bottlenecks = (0..depth)
            .map(|i| BottleneckBlock {
                reduce: ConvBnRelu::new(store, &format!("{name}.bottleneck{i}.reduce"), ch, ch, 1, bias, rng),
                spatial: ConvBnRelu::new(store, &format!("{name}.bottleneck{i}.spatial"), ch, ch, 3, bias, rng),
                residual: opts.bottleneck_residual,
            })
            .collect();
        let fuse = ConvBnRelu::new(store, &format!("{name}.fuse"), 2 * ch, cout, 1, bias, rng);
        Ok(CspBlock { cin, cout, split1, split2, bottlenecks, fuse })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).c();
        if c != self.cin {
            return Err(Error::Shape(format!("CSP block expects {} input channels, got {c}", self.cin)));
        }
        let mut x1 = self.split1.forward(s, x)?;
        for b in &self.bottlenecks {
            x1 = b.forward(s, x1)?;
        }
        let x2 = match &self.split2 {
            Shortcut::Projected(p) => p.forward(s, x)?,
            Shortcut::Plain(p) => p.forward(s, x)?,
        };
        let merged = s.tape.concat_channels(x1, x2)?;
        self.fuse.forward(s, merged)
    }

    pub fn param_count(&self) -> usize {
        let shortcut = match &self.split2 {
            Shortcut::Projected(p) => p.param_count(),
            Shortcut::Plain(p) => p.param_count(),
        };
        self.split1.param_count()
            + shortcut
            + self.bottlenecks.iter().map(|b| b.reduce.param_count() + b.spatial.param_count()).sum::<usize>()
            + self.fuse.param_count()
    }
}

/// Closed-form learnable parameter count of a CSP block.
pub fn csp_param_count(cin: usize, cout: usize, depth: usize, opts: CspOptions) -> Result<usize> {
    validate(cout, depth)?;
    let ch = cout / 2;
    let b = usize::from(opts.conv_bias_before_bn);
    let cbr = |ci: usize, co: usize, k: usize| ci * co * k * k + b * co + 2 * co;
    let shortcut = if opts.plain_shortcut { cin * ch + ch } else { cbr(cin, ch, 1) };
    Ok(cbr(cin, ch, 1) + shortcut + depth * (cbr(ch, ch, 1) + cbr(ch, ch, 3)) + cbr(2 * ch, cout, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DoubleConv;

    #[test]
    fn zero_depth_and_odd_width_rejected() {
        assert!(csp_param_count(32, 64, 0, CspOptions::default()).is_err());
        assert!(csp_param_count(32, 63, 1, CspOptions::default()).is_err());
    }

    #[test]
    fn count_increases_with_depth() {
        let counts: Vec<_> = (1..6).map(|n| csp_param_count(32, 64, n, CspOptions::default()).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cheaper_than_double_conv_at_every_stage() {
        for (cin, cout) in [(32, 64), (64, 128), (128, 256), (256, 512)] {
            let csp = csp_param_count(cin, cout, 3, CspOptions::default()).unwrap();
            assert!(csp < DoubleConv::count(cin, cout, cout, false), "stage {cin}->{cout}");
        }
    }
}
