//! Run configuration: TOML sections for every module plus two presets.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::cin::CinConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::losses::LossConfig;
use crate::maskgen::MaskgenConfig;
use crate::msff::MsffConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// `text.*` settings for the hash text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub dim: usize,
    pub seed: u64,
    /// Classify against every variant instead of the primary name only.
    pub prompt_ensemble: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            prompt_ensemble: true,
        }
    }
}

/// `train.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iterations at which the rate is divided by 10; empty means 90% and 95%.
    pub lr_drop_points: Vec<usize>,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            iterations: 90_000,
            lr_drop_points: vec![81_000, 86_000],
            batch_size: 64,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn drop_points(&self) -> Vec<usize> {
        match &self.lr_drop_points {
            p if !p.is_empty() => p.clone(),
            _ if self.iterations == 0 => Vec::new(),
            _ => {
                let at = |f: f64| ((self.iterations as f64 * f).round() as usize).min(self.iterations - 1);
                let mut p = vec![at(0.90), at(0.95)];
                p.dedup();
                p
            }
        }
    }

    /// Learning rate in effect at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let k = self.drop_points().iter().filter(|&&p| iter >= p).count();
        self.learning_rate / 10f64.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return Err(Error::config("train rates must be positive"));
        }
        let p = self.drop_points();
        if p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.lr_drop_points must be strictly increasing"));
        }
        if self.iterations > 0 && p.iter().any(|&x| x >= self.iterations) {
            return Err(Error::config("train.lr_drop_points must be below train.iterations"));
        }
        Ok(())
    }
}

/// `eval.*` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub max_detections: usize,
    /// Predictions below this confidence are not ranked.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::ClassAgnostic,
            max_detections: 100,
            score_threshold: 0.0,
        }
    }
}

/// Module-ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Text embeddings replaced by zeros before aggregation and classification.
    pub no_text: bool,
    /// Only the projected decoder-final map feeds the mask generator.
    pub skip_msff: bool,
    /// Coarse masks pass through; confidence from pooled aggregation output.
    pub skip_cin: bool,
    /// Raw dot-product weighting, no filtering.
    pub skip_tva: bool,
}

impl Ablation {
    pub const SWITCHES: [&'static str; 4] = ["no_text", "skip_msff", "skip_cin", "skip_tva"];

    pub fn with_switch(mut self, name: &str) -> Result<Self> {
        match name {
            "no_text" => self.no_text = true,
            "skip_msff" => self.skip_msff = true,
            "skip_cin" => self.skip_cin = true,
            "skip_tva" => self.skip_tva = true,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation switch {other:?}; expected one of {:?}",
                    Self::SWITCHES
                )))
            }
        }
        Ok(self)
    }

    pub fn describe(&self) -> String {
        let on: Vec<&str> = Self::SWITCHES
            .iter()
            .zip([self.no_text, self.skip_msff, self.skip_cin, self.skip_tva])
            .filter(|(_, v)| *v)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub msff: MsffConfig,
    pub maskgen: MaskgenConfig,
    pub cin: CinConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// Full-scale settings.
    pub fn full() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            backbone: BackboneConfig::default(),
            text: TextConfig::default(),
            msff: MsffConfig::default(),
            maskgen: MaskgenConfig::default(),
            cin: CinConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// CPU-sized settings for 64-pixel synthetic data.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.precision = Precision::F64;
        c.msff.fusion_scale = 8;
        c.maskgen = MaskgenConfig {
            num_queries: 20,
            layers: 6,
            heads: 1,
            hidden_dim: 64,
            embed_dim: 64,
            ffn_dim: 128,
        };
        c.data.image_size = 64;
        c.data.augment = false;
        c.data.synth.min_instances = 2;
        c.train = TrainConfig {
            learning_rate: 1e-3,
            iterations: 2000,
            lr_drop_points: Vec::new(),
            batch_size: 4,
            ..TrainConfig::default()
        };
        c
    }

    /// Parses TOML text. A top-level `preset = "desk" | "full"` selects the
    /// base that the remaining keys override (default `desk`).
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut over: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid TOML: {e}")))?;
        let base = match over.remove("preset") {
            None => Self::desk(),
            Some(toml::Value::String(s)) if s == "full" => Self::full(),
            Some(toml::Value::String(s)) if s == "desk" => Self::desk(),
            Some(other) => return Err(Error::config(format!("unknown preset {other}"))),
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(over));
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.data.synth.validate()?;
        if self.text.dim != self.maskgen.embed_dim {
            return Err(Error::config(format!(
                "text.dim ({}) must equal maskgen.embed_dim ({})",
                self.text.dim, self.maskgen.embed_dim
            )));
        }
        if self.maskgen.heads == 0 || !self.maskgen.hidden_dim.is_multiple_of(self.maskgen.heads) {
            return Err(Error::config("maskgen.hidden_dim must be a positive multiple of maskgen.heads"));
        }
        if !matches!(self.msff.fusion_scale, 8 | 16 | 32) {
            return Err(Error::config("msff.fusion_scale must be 8, 16 or 32"));
        }
        if !self.data.image_size.is_multiple_of(32) {
            return Err(Error::config("data.image_size must be a multiple of 32"));
        }
        if !(0.0..=1.0).contains(&self.cin.confidence_threshold) {
            return Err(Error::config("cin.confidence_threshold must be in [0, 1]"));
        }
        if !(self.data.min_scale > 0.0 && self.data.min_scale <= self.data.max_scale) {
            return Err(Error::config("data scale range must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}
