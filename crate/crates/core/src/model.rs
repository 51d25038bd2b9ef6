//! Encoder-decoder segmentation network and its ablation variants.
//!
//! Five encoder stages (the first at full resolution, the rest behind a 2x2
//! max pool) feed four decoder stages of bilinear upsampling, skip
//! concatenation and a double convolution. Encoder blocks are CSP blocks or
//! plain double convolutions; dynamic attention can follow any encoder stage.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionState, DynamicKnnAttention};
use crate::csp::{CspBlock, CspOptions};
use crate::error::{Error, Result};
use crate::nn::{Conv, DoubleConv, ParamStore, Session};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder1,
    Encoder2,
    Encoder3,
    Encoder4,
    Bottleneck,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Encoder1, Stage::Encoder2, Stage::Encoder3, Stage::Encoder4, Stage::Bottleneck];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder1 => "encoder1",
            Stage::Encoder2 => "encoder2",
            Stage::Encoder3 => "encoder3",
            Stage::Encoder4 => "encoder4",
            Stage::Bottleneck => "bottleneck",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// The five architectures reported by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Csp,
    Attention,
    KloNet,
    VanillaUnet,
}

impl Variant {
    /// Ablation order: baseline, CSP only, attention only, full model.
    pub const ABLATION: [Variant; 4] = [Variant::Baseline, Variant::Csp, Variant::Attention, Variant::KloNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Csp => "csp",
            Variant::Attention => "attn",
            Variant::KloNet => "klonet",
            Variant::VanillaUnet => "vanilla-unet",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Csp => "CSP + baseline",
            Variant::Attention => "Dynamic K-NN + baseline",
            Variant::KloNet => "CSP + dynamic K-NN + baseline (KLO-Net)",
            Variant::VanillaUnet => "Vanilla U-Net",
        }
    }

    /// Published learnable parameter count.
    pub fn reference_params(self) -> usize {
        match self {
            Variant::Baseline => 7_849_058,
            Variant::Csp => 6_287_522,
            Variant::Attention => 9_242_852,
            Variant::KloNet => 7_681_316,
            Variant::VanillaUnet => 17_261_825,
        }
    }

    pub fn spec(self) -> ModelSpec {
        let mut spec = ModelSpec::default();
        match self {
            Variant::Baseline => {
                spec.use_csp = false;
                spec.use_attention = false;
            }
            Variant::Csp => spec.use_attention = false,
            Variant::Attention => spec.use_csp = false,
            Variant::KloNet => {}
            Variant::VanillaUnet => {
                spec.channels = vec![64, 128, 256, 512, 1024];
                spec.use_csp = false;
                spec.use_attention = false;
                spec.halve_deep_widths = true;
                spec.num_classes = 1;
            }
        }
        spec
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Variant::Baseline, Variant::Csp, Variant::Attention, Variant::KloNet, Variant::VanillaUnet]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub channels: Vec<usize>,
    pub csp_depth: usize,
    pub attention_sites: BTreeSet<Stage>,
    pub num_classes: usize,
    pub use_csp: bool,
    pub use_attention: bool,
    pub attention: AttentionConfig,
    pub conv_bias_before_bn: bool,
    pub csp_plain_shortcut: bool,
    pub bottleneck_residual: bool,
    pub gating_bias: bool,
    /// Classic bilinear U-Net layout: the deepest encoder and every decoder
    /// stage but the last emit half their nominal width, and decoder
    /// double convs use half their input width in the middle.
    pub halve_deep_widths: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            channels: vec![32, 64, 128, 256, 512],
            csp_depth: 3,
            attention_sites: [Stage::Encoder4, Stage::Bottleneck].into_iter().collect(),
            num_classes: 2,
            use_csp: true,
            use_attention: true,
            attention: AttentionConfig::default(),
            conv_bias_before_bn: false,
            csp_plain_shortcut: false,
            bottleneck_residual: false,
            gating_bias: true,
            halve_deep_widths: false,
        }
    }
}

/// Channel plan of one decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderWidths {
    pub upsampled: usize,
    pub skip: usize,
    pub mid: usize,
    pub out: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 {
            return Err(Error::Config(format!("need 5 channel widths, got {}", self.channels.len())));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("channel widths must be positive and strictly increasing: {:?}", self.channels)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.use_csp {
            if self.csp_depth == 0 {
                return Err(Error::Config("csp_depth must be at least 1".into()));
            }
            if self.channels.iter().any(|c| c % 2 != 0) {
                return Err(Error::Config("CSP stages need even widths".into()));
            }
        }
        if self.use_attention {
            for site in &self.attention_sites {
                self.attention.validate(self.encoder_widths()[site.index()])?;
            }
        }
        Ok(())
    }

    pub fn encoder_widths(&self) -> [usize; 5] {
        let c = &self.channels;
        let deepest = if self.halve_deep_widths { c[4] / 2 } else { c[4] };
        [c[0], c[1], c[2], c[3], deepest]
    }

    /// Decoder stages from deepest to shallowest.
    pub fn decoder_widths(&self) -> Vec<DecoderWidths> {
        let enc = self.encoder_widths();
        let mut up = enc[4];
        (0..4)
            .rev()
            .map(|i| {
                let skip = self.channels[i];
                let out = if self.halve_deep_widths && i > 0 { self.channels[i] / 2 } else { self.channels[i] };
                let mid = if self.halve_deep_widths { (up + skip) / 2 } else { out };
                let w = DecoderWidths { upsampled: up, skip, mid, out };
                up = out;
                w
            })
            .collect()
    }

    pub fn has_attention(&self, stage: Stage) -> bool {
        self.use_attention && self.attention_sites.contains(&stage)
    }

    pub fn csp_options(&self) -> CspOptions {
        CspOptions {
            conv_bias_before_bn: self.conv_bias_before_bn,
            plain_shortcut: self.csp_plain_shortcut,
            bottleneck_residual: self.bottleneck_residual,
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let sites: Vec<&str> = self.attention_sites.iter().map(|s| s.name()).collect();
        vec![
            ("channels".into(), join(&self.channels)),
            ("csp_depth".into(), self.csp_depth.to_string()),
            ("attention_sites".into(), sites.join(",")),
            ("num_classes".into(), self.num_classes.to_string()),
            ("use_csp".into(), self.use_csp.to_string()),
            ("use_attention".into(), self.use_attention.to_string()),
            ("heads".into(), self.attention.heads.to_string()),
            ("k_min".into(), self.attention.k_min.to_string()),
            ("k_max".into(), self.attention.k_max.to_string()),
            ("straight_through".into(), self.attention.straight_through.to_string()),
            ("attention_residual".into(), self.attention.residual.to_string()),
            ("conv_bias_before_bn".into(), self.conv_bias_before_bn.to_string()),
            ("csp_plain_shortcut".into(), self.csp_plain_shortcut.to_string()),
            ("bottleneck_residual".into(), self.bottleneck_residual.to_string()),
            ("gating_bias".into(), self.gating_bias.to_string()),
            ("halve_deep_widths".into(), self.halve_deep_widths.to_string()),
        ]
    }

    /// Apply one `key=value` pair. Returns `Ok(false)` for keys this spec
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "channels" => {
                self.channels = value.split(',').map(|c| parse(key, c)).collect::<Result<_>>()?;
            }
            "csp_depth" => self.csp_depth = parse(key, value)?,
            "attention_sites" => {
                self.attention_sites = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Stage::from_str)
                    .collect::<Result<_>>()?;
            }
            "num_classes" => self.num_classes = parse(key, value)?,
            "use_csp" => self.use_csp = parse(key, value)?,
            "use_attention" => self.use_attention = parse(key, value)?,
            "heads" => self.attention.heads = parse(key, value)?,
            "k_min" => self.attention.k_min = parse(key, value)?,
            "k_max" => self.attention.k_max = parse(key, value)?,
            "straight_through" => self.attention.straight_through = parse(key, value)?,
            "attention_residual" => self.attention.residual = parse(key, value)?,
            "conv_bias_before_bn" => self.conv_bias_before_bn = parse(key, value)?,
            "csp_plain_shortcut" => self.csp_plain_shortcut = parse(key, value)?,
            "bottleneck_residual" => self.bottleneck_residual = parse(key, value)?,
            "gating_bias" => self.gating_bias = parse(key, value)?,
            "halve_deep_widths" => self.halve_deep_widths = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
pub enum EncoderBlock {
    Double(DoubleConv),
    Csp(CspBlock),
}

impl EncoderBlock {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            EncoderBlock::Double(b) => b.forward(s, x),
            EncoderBlock::Csp(b) => b.forward(s, x),
        }
    }
}

/// An instantiated network owning its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoders: Vec<EncoderBlock>,
    pub attention: Vec<Option<DynamicKnnAttention>>,
    pub decoders: Vec<DoubleConv>,
    pub head: Conv,
}

impl Model {
    /// Deterministic construction: the same `(spec, seed)` yields
    /// bit-identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = spec.encoder_widths();
        let bias = spec.conv_bias_before_bn;
        let mut encoders = Vec::with_capacity(5);
        let mut attention = Vec::with_capacity(5);
        let mut cin = 1;
        for stage in Stage::ALL {
            let name = stage.name();
            let cout = enc[stage.index()];
            encoders.push(if spec.use_csp {
                EncoderBlock::Csp(CspBlock::new(&mut store, name, cin, cout, spec.csp_depth, spec.csp_options(), &mut rng)?)
            } else {
                EncoderBlock::Double(DoubleConv::new(&mut store, name, cin, cout, cout, bias, &mut rng))
            });
            attention.push(if spec.has_attention(stage) {
                Some(DynamicKnnAttention::new(
                    &mut store,
                    &format!("{name}.attention"),
                    cout,
                    spec.attention,
                    spec.gating_bias,
                    &mut rng,
                )?)
            } else {
                None
            });
            cin = cout;
        }
        let mut decoders = Vec::with_capacity(4);
        for (i, w) in spec.decoder_widths().iter().enumerate() {
            decoders.push(DoubleConv::new(
                &mut store,
                &format!("decoder{}", 4 - i),
                w.upsampled + w.skip,
                w.mid,
                w.out,
                bias,
                &mut rng,
            ));
        }
        let last = spec.decoder_widths()[3].out;
        let head = Conv::new(&mut store, "head", last, spec.num_classes, 1, 0, true, &mut rng);
        Ok(Model { spec: spec.clone(), store, encoders, attention, decoders, head })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_with_diagnostics(s, x, false)?.0)
    }

    /// Logits `[B, num_classes, H, W]`. With `want_state`, also returns the
    /// attention state of every attention site.
    pub fn forward_with_diagnostics(
        &self,
        s: &mut Session,
        x: Var,
        want_state: bool,
    ) -> Result<(Var, Vec<(Stage, AttentionState)>)> {
        let shape = s.tape.shape(x);
        if shape.c() != 1 {
            return Err(Error::Shape(format!("model expects single-channel input, got {shape}")));
        }
        if !shape.h().is_multiple_of(16) || !shape.w().is_multiple_of(16) {
            return Err(Error::Shape(format!(
                "input {}x{} must be padded to a multiple of 16 in both dimensions",
                shape.h(),
                shape.w()
            )));
        }
        let mut skips = Vec::with_capacity(4);
        let mut states = Vec::new();
        let mut h = x;
        for stage in Stage::ALL {
            if stage != Stage::Encoder1 {
                h = s.tape.maxpool2x2(h)?;
            }
            h = self.encoders[stage.index()].forward(s, h)?;
            if let Some(att) = &self.attention[stage.index()] {
                let (out, state) = att.forward_with_state(s, h, want_state)?;
                h = out;
                if let Some(state) = state {
                    states.push((stage, state));
                }
            }
            if stage != Stage::Bottleneck {
                skips.push(h);
            }
        }
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = s.tape.upsample2x(h)?;
            let cat = s.tape.concat_channels(skip, up)?;
            h = dec.forward(s, cat)?;
        }
        Ok((self.head.forward(s, h)?, states))
    }

    /// Learnable parameters grouped by their top-level block, in build order.
    pub fn count_parameters(&self) -> ParamTable {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.kind.trainable()) {
            let block = layer_name(&p.name);
            match rows.last_mut() {
                Some((name, n)) if *name == block => *n += p.value.numel(),
                _ => rows.push((block, p.value.numel())),
            }
        }
        let total = rows.iter().map(|(_, n)| n).sum();
        ParamTable { rows, total }
    }
}

/// Block name of a parameter: the stage, plus `.attention` for attention
/// modules.
fn layer_name(param: &str) -> String {
    let mut parts = param.split('.');
    let stage = parts.next().unwrap_or_default();
    match parts.next() {
        Some("attention") => format!("{stage}.attention"),
        _ => stage.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}
