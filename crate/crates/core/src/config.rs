//! Run configuration as UTF-8 `key=value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. `variant=NAME`
//! selects an architecture preset that the remaining model keys then
//! override, whatever their order in the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossWeights, TverskyParams, SMOOTH};
use crate::model::{ModelSpec, Variant};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    pub model: ModelSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Some(Variant::KloNet),
            model: Variant::KloNet.spec(),
            optimizer: OptimizerKind::adam(),
            lr: 1e-4,
            batch_size: 4,
            epochs: 5,
            loss: LossKind::default(),
            seed: 42,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/klonet"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "variant") {
            let variant: Variant = v.parse()?;
            cfg.variant = Some(variant);
            cfg.model = variant.spec();
        }
        let mut weights = LossWeights::default();
        let mut tversky = TverskyParams::default();
        let mut loss_name = "ablation".to_string();
        let mut momentum = 0.9;
        let mut optimizer = "adam".to_string();
        let mut lr = None;
        for (k, v) in &pairs {
            match k.as_str() {
                "variant" => {}
                "optimizer" => optimizer = v.clone(),
                "lr" => lr = Some(parse(k, v)?),
                "momentum" => momentum = parse(k, v)?,
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "loss" => loss_name = v.clone(),
                "dice_weight" => weights.dice = parse(k, v)?,
                "boundary_weight" => weights.boundary = parse(k, v)?,
                "tversky_alpha" => tversky.alpha = parse(k, v)?,
                "tversky_beta" => tversky.beta = parse(k, v)?,
                "tversky_gamma" => tversky.gamma = parse(k, v)?,
                "smooth" => {
                    let s: f64 = parse(k, v)?;
                    if s != SMOOTH {
                        return Err(Error::Config(format!("smoothing is fixed at {SMOOTH}, got {s}")));
                    }
                }
                "seed" => cfg.seed = parse(k, v)?,
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                _ => {
                    if !cfg.model.set(k, v)? {
                        return Err(Error::Config(format!("unknown key {k:?}")));
                    }
                    if cfg.variant.map(|p| p.spec()) != Some(cfg.model.clone()) {
                        cfg.variant = None;
                    }
                }
            }
        }
        cfg.optimizer = match optimizer.as_str() {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::Sgd { momentum },
            o => return Err(Error::Config(format!("unknown optimizer {o:?}"))),
        };
        cfg.lr = lr.unwrap_or(match cfg.optimizer {
            OptimizerKind::Adam { .. } => 1e-4,
            OptimizerKind::Sgd { .. } => 1e-2,
        });
        cfg.loss = match loss_name.as_str() {
            "ablation" => LossKind::Ablation(weights),
            "focal_tversky" => LossKind::FocalTversky(tversky),
            l => return Err(Error::Config(format!("unknown loss {l:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if let LossKind::FocalTversky(p) = self.loss {
            p.validate()?;
        }
        Ok(())
    }

    /// The full effective configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        if let Some(v) = self.variant {
            lines.push(format!("variant={}", v.name()));
        }
        for (k, v) in self.model.to_kv() {
            lines.push(format!("{k}={v}"));
        }
        lines.push(format!("optimizer={}", self.optimizer.name()));
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            lines.push(format!("momentum={momentum}"));
        }
        lines.push(format!("lr={}", self.lr));
        lines.push(format!("batch_size={}", self.batch_size));
        lines.push(format!("epochs={}", self.epochs));
        lines.push(format!("loss={}", self.loss.name()));
        let (w, t) = match self.loss {
            LossKind::Ablation(w) => (w, TverskyParams::default()),
            LossKind::FocalTversky(t) => (LossWeights::default(), t),
        };
        lines.push(format!("dice_weight={}", w.dice));
        lines.push(format!("boundary_weight={}", w.boundary));
        lines.push(format!("tversky_alpha={}", t.alpha));
        lines.push(format!("tversky_beta={}", t.beta));
        lines.push(format!("tversky_gamma={}", t.gamma));
        lines.push(format!("smooth={SMOOTH}"));
        lines.push(format!("seed={}", self.seed));
        lines.push(format!("data_dir={}", self.data_dir.display()));
        lines.push(format!("out_dir={}", self.out_dir.display()));
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_str("epochs=3\nlearning_rate=0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn variant_preset_applies_before_overrides() {
        let cfg = RunConfig::parse_str("k_max=32\nvariant=csp\n").unwrap();
        assert!(!cfg.model.use_attention);
        assert_eq!(cfg.model.attention.k_max, 32);
        assert_eq!(cfg.variant, None);
    }

    #[test]
    fn focal_tversky_selection() {
        let cfg = RunConfig::parse_str("loss=focal_tversky\n").unwrap();
        assert_eq!(cfg.loss, LossKind::FocalTversky(TverskyParams { alpha: 0.01, beta: 0.95, gamma: 1.5 }));
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }
}
