//! Analytic cost model: parameters, FLOPs and peak activation memory of a
//! [`ModelSpec`] at a given input resolution, without building the network.
//!
//! Multiply-accumulates count as two FLOPs. Batch norm, ReLU, residual adds
//! and softmax count one FLOP per element; a 2x2 max pool counts one per
//! input element and bilinear upsampling seven per output element.
//! Attention assumes every query keeps `min(k_max, N)` keys.

use crate::attention::{AttentionFlops, DynamicKnnAttention};
use crate::csp::csp_param_count;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Stage};
use crate::nn::DoubleConv;

/// One activation-producing step of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub name: String,
    pub elements: usize,
    pub flops: u64,
    /// Steps whose outputs this one reads.
    pub inputs: Vec<usize>,
}

/// Cost of one top-level block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    /// Output `(channels, height, width)`.
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockCost>,
    pub steps: Vec<Step>,
    pub params: usize,
    pub flops: u64,
    /// Largest sum of live activation elements at any step, batch 1.
    pub peak_elements: usize,
}

/// Bytes per stored value in size reports (single precision).
pub const REPORT_BYTES: usize = 4;

/// Storage of `params` single-precision values in MiB.
pub fn model_size_mb(params: usize) -> f64 {
    (REPORT_BYTES * params) as f64 / (1u64 << 20) as f64
}

impl Profile {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn model_size_mb(&self) -> f64 {
        model_size_mb(self.params)
    }

    pub fn peak_activation_bytes(&self) -> usize {
        self.peak_elements * REPORT_BYTES
    }
}

/// Peak live elements over a step list, freeing each output after its last
/// reader. Returns the running peak after every step.
pub fn liveness_peaks(steps: &[Step]) -> Vec<usize> {
    let mut last_use: Vec<usize> = (0..steps.len()).collect();
    for (i, s) in steps.iter().enumerate() {
        for &j in &s.inputs {
            last_use[j] = last_use[j].max(i);
        }
    }
    let mut live = 0usize;
    let mut peak = 0usize;
    let mut out = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        live += s.elements;
        peak = peak.max(live);
        out.push(peak);
        for j in 0..=i {
            if last_use[j] == i && j != steps.len() - 1 {
                live -= steps[j].elements;
            }
        }
    }
    out
}

struct Planner {
    steps: Vec<Step>,
    blocks: Vec<BlockCost>,
    block_flops: u64,
}

impl Planner {
    fn push(&mut self, name: String, elements: usize, flops: u64, inputs: Vec<usize>) -> usize {
        self.block_flops += flops;
        self.steps.push(Step { name, elements, flops, inputs });
        self.steps.len() - 1
    }

    fn close(&mut self, name: &str, params: usize, output: (usize, usize, usize)) {
        let flops = std::mem::take(&mut self.block_flops);
        self.blocks.push(BlockCost { name: name.to_string(), params, flops, output });
    }

    /// Convolution + batch norm + ReLU, fused into one stored activation.
    fn cbr(&mut self, name: String, input: usize, cin: usize, cout: usize, k: usize, hw: usize, bias: bool) -> usize {
        let macs = (cin * cout * k * k * hw) as u64;
        let extra = if bias { cout * hw } else { 0 } as u64;
        self.push(name, cout * hw, 2 * macs + extra + 2 * (cout * hw) as u64, vec![input])
    }

    fn double(&mut self, name: &str, input: usize, cin: usize, mid: usize, cout: usize, hw: usize, bias: bool) -> usize {
        let a = self.cbr(format!("{name}.conv1"), input, cin, mid, 3, hw, bias);
        self.cbr(format!("{name}.conv2"), a, mid, cout, 3, hw, bias)
    }

    fn csp(&mut self, name: &str, input: usize, cin: usize, cout: usize, spec: &ModelSpec, hw: usize) -> usize {
        let half = cout / 2;
        let bias = spec.conv_bias_before_bn;
        let mut a = self.cbr(format!("{name}.split1"), input, cin, half, 1, hw, bias);
        let b = if spec.csp_plain_shortcut {
            self.push(format!("{name}.split2"), half * hw, 2 * (cin * half * hw) as u64, vec![input])
        } else {
            self.cbr(format!("{name}.split2"), input, cin, half, 1, hw, bias)
        };
        for i in 0..spec.csp_depth {
            let r = self.cbr(format!("{name}.m{i}.reduce"), a, half, half, 1, hw, bias);
            let s = self.cbr(format!("{name}.m{i}.spatial"), r, half, half, 3, hw, bias);
            a = if spec.bottleneck_residual {
                self.push(format!("{name}.m{i}.add"), half * hw, (half * hw) as u64, vec![a, s])
            } else {
                s
            };
        }
        let cat = self.push(format!("{name}.concat"), cout * hw, 0, vec![a, b]);
        self.cbr(format!("{name}.fuse"), cat, cout, cout, 1, hw, bias)
    }

    fn attention(&mut self, name: &str, input: usize, c: usize, n: usize, spec: &ModelSpec) -> usize {
        let cfg = &spec.attention;
        let h = cfg.heads;
        let k = cfg.k_max.min(n);
        let f = AttentionFlops::compute(1, c, n, cfg, Some((n * k) as u64));
        let q = self.push(format!("{name}.q"), c * n, f.projection / 4, vec![input]);
        let kk = self.push(format!("{name}.k"), c * n, f.projection / 4, vec![input]);
        let v = self.push(format!("{name}.v"), c * n, f.projection / 4, vec![input]);
        let scores = self.push(format!("{name}.scores"), h * n * n, f.similarity, vec![q, kk]);
        let tau = self.push(format!("{name}.tau"), n, f.gating, vec![input]);
        let w = self.push(format!("{name}.weights"), h * n * k, f.softmax, vec![scores, tau]);
        let o = self.push(format!("{name}.aggregate"), c * n, f.aggregation, vec![w, v]);
        let p = self.push(format!("{name}.proj"), c * n, f.projection / 4 + (c * n) as u64, vec![o]);
        if cfg.residual {
            self.push(format!("{name}.residual"), c * n, f.residual, vec![input, p])
        } else {
            p
        }
    }
}

/// Cost profile for one single-channel input of `height x width`.
pub fn profile(spec: &ModelSpec, height: usize, width: usize) -> Result<Profile> {
    spec.validate()?;
    if height == 0 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(Error::Config(format!("resolution {height}x{width} must be a positive multiple of 16; pad the input first")));
    }
    let mut p = Planner { steps: Vec::new(), blocks: Vec::new(), block_flops: 0 };
    let enc = spec.encoder_widths();
    let bias = spec.conv_bias_before_bn;
    let mut x = p.push("input".into(), height * width, 0, vec![]);
    p.close("input", 0, (1, height, width));
    let (mut h, mut w) = (height, width);
    let mut cin = 1;
    let mut skips = Vec::new();
    for stage in Stage::ALL {
        if stage != Stage::Encoder1 {
            x = p.push(format!("{}.pool", stage.name()), cin * h * w / 4, (cin * h * w) as u64, vec![x]);
            h /= 2;
            w /= 2;
        }
        let cout = enc[stage.index()];
        let params = if spec.use_csp {
            x = p.csp(stage.name(), x, cin, cout, spec, h * w);
            csp_param_count(cin, cout, spec.csp_depth, spec.csp_options())?
        } else {
            x = p.double(stage.name(), x, cin, cout, cout, h * w, bias);
            DoubleConv::count(cin, cout, cout, bias)
        };
        p.close(stage.name(), params, (cout, h, w));
        if spec.has_attention(stage) {
            let name = format!("{}.attention", stage.name());
            x = p.attention(&name, x, cout, h * w, spec);
            p.close(&name, DynamicKnnAttention::count(cout, spec.gating_bias), (cout, h, w));
        }
        if stage != Stage::Bottleneck {
            skips.push((x, cout));
        }
        cin = cout;
    }
    for (i, d) in spec.decoder_widths().iter().enumerate() {
        let name = format!("decoder{}", 4 - i);
        let (skip, _) = skips.pop().expect("one skip per decoder");
        h *= 2;
        w *= 2;
        let up = p.push(format!("{name}.upsample"), d.upsampled * h * w, 7 * (d.upsampled * h * w) as u64, vec![x]);
        let cat = p.push(format!("{name}.concat"), (d.upsampled + d.skip) * h * w, 0, vec![skip, up]);
        x = p.double(&name, cat, d.upsampled + d.skip, d.mid, d.out, h * w, bias);
        p.close(&name, DoubleConv::count(d.upsampled + d.skip, d.mid, d.out, bias), (d.out, h, w));
        cin = d.out;
    }
    let k = spec.num_classes;
    p.push("head".into(), k * h * w, (2 * cin * k * h * w + k * h * w) as u64, vec![x]);
    p.close("head", cin * k + k, (k, h, w));
    let peaks = liveness_peaks(&p.steps);
    Ok(Profile {
        height,
        width,
        params: p.blocks.iter().map(|b| b.params).sum(),
        flops: p.blocks.iter().map(|b| b.flops).sum(),
        peak_elements: *peaks.last().unwrap_or(&0),
        blocks: p.blocks,
        steps: p.steps,
    })
}
