use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::align::{Block, BlockSet, DiscriminatorWidths};
use crate::detect::BackboneSpec;

/// Scalar type used for training arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(format!("precision must be f32 or f64, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

/// Training hyperparameters and model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the style alignment loss.
    pub lambda: f64,
    /// Weight of the attention alignment loss.
    pub mu: f64,
    /// Focal modulation of the style discriminators, shared by all blocks.
    pub gamma: f64,
    /// Focal modulation of the attention discriminator, per block.
    pub epsilon: BTreeMap<u8, f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient norm limit per step; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub sd_blocks: BlockSet,
    pub sa_blocks: BlockSet,
    pub seed: u64,
    pub precision: Precision,
    pub channels: [usize; 5],
    pub style_hidden: [usize; 2],
    pub attention_conv: usize,
    pub attention_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let widths = DiscriminatorWidths::default();
        Self {
            lambda: 1.0,
            mu: 0.5,
            gamma: 5.0,
            epsilon: BTreeMap::from([(4, 4.0), (5, 5.0)]),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 0.0,
            epochs: 20,
            sd_blocks: BlockSet::all(),
            sa_blocks: BlockSet::of(&[4, 5]).expect("alignable blocks"),
            seed: 0,
            precision: Precision::F32,
            channels: BackboneSpec::default().channels,
            style_hidden: widths.style_hidden,
            attention_conv: widths.attention_conv,
            attention_hidden: widths.attention_hidden,
        }
    }
}

const KEYS: [&str; 18] = [
    "lambda",
    "mu",
    "gamma",
    "epsilon",
    "lr",
    "momentum",
    "weight_decay",
    "grad_clip",
    "epochs",
    "sd_blocks",
    "sa_blocks",
    "seed",
    "precision",
    "channels",
    "style_hidden",
    "attention_conv",
    "attention_hidden",
    "batch",
];

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items = v
        .split(',')
        .map(|x| parse_num::<usize>(key, x.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| HarnessError::Config(format!("{key}: expected {N} comma-separated values")))
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            channels: self.channels,
            ..BackboneSpec::default()
        }
    }

    pub fn widths(&self) -> DiscriminatorWidths {
        DiscriminatorWidths {
            style_hidden: self.style_hidden,
            attention_conv: self.attention_conv,
            attention_hidden: self.attention_hidden,
        }
    }

    /// Whether the style term contributes to the objective.
    pub fn style_active(&self) -> bool {
        self.lambda > 0.0 && !self.sd_blocks.is_empty()
    }

    /// Whether the attention term contributes to the objective.
    pub fn attention_active(&self) -> bool {
        self.mu > 0.0 && !self.sa_blocks.is_empty()
    }

    pub fn epsilon_for(&self, block: Block) -> Option<f64> {
        self.epsilon.get(&block.index()).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        for (&b, &e) in &self.epsilon {
            if Block::new(b).map(|b| !b.is_alignable()).unwrap_or(true) {
                return bad(format!("epsilon given for block {b}; alignable blocks are 3, 4, 5"));
            }
            if !(e.is_finite() && e >= 0.0) {
                return bad(format!("epsilon for block {b} must be >= 0, got {e}"));
            }
        }
        if self.attention_active() {
            if let Some(b) = self.sa_blocks.iter().find(|&b| self.epsilon_for(b).is_none()) {
                return bad(format!("attention alignment on block {b} needs an epsilon"));
            }
        }
        if self.channels.contains(&0)
            || self.style_hidden.contains(&0)
            || self.attention_conv == 0
            || self.attention_hidden == 0
        {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are ignored;
    /// unknown or repeated keys are errors. Absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(HarnessError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            let blocks = |v: &str| {
                BlockSet::from_str(v).map_err(|e| HarnessError::Config(format!("{key}: {e}")))
            };
            match key {
                "lambda" => cfg.lambda = parse_num(key, v)?,
                "mu" => cfg.mu = parse_num(key, v)?,
                "gamma" => cfg.gamma = parse_num(key, v)?,
                "epsilon" => {
                    cfg.epsilon.clear();
                    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        let (b, e) = item
                            .split_once(':')
                            .ok_or_else(|| HarnessError::Config(format!("epsilon: expected block:value, got {item:?}")))?;
                        cfg.epsilon.insert(parse_num(key, b.trim())?, parse_num(key, e.trim())?);
                    }
                }
                "lr" => cfg.lr = parse_num(key, v)?,
                "momentum" => cfg.momentum = parse_num(key, v)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, v)?,
                "grad_clip" => cfg.grad_clip = parse_num(key, v)?,
                "epochs" => cfg.epochs = parse_num(key, v)?,
                "sd_blocks" => cfg.sd_blocks = blocks(v)?,
                "sa_blocks" => cfg.sa_blocks = blocks(v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "precision" => cfg.precision = v.parse().map_err(HarnessError::Config)?,
                "channels" => cfg.channels = parse_list(key, v)?,
                "style_hidden" => cfg.style_hidden = parse_list(key, v)?,
                "attention_conv" => cfg.attention_conv = parse_num(key, v)?,
                "attention_hidden" => cfg.attention_hidden = parse_num(key, v)?,
                "batch" => {
                    if v != "1" {
                        return Err(HarnessError::Config(format!(
                            "batch: only one source and one target image per step is supported, got {v}"
                        )));
                    }
                }
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field in the format accepted by [`TrainConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let eps = self
            .epsilon
            .iter()
            .map(|(b, e)| format!("{b}:{e}"))
            .collect::<Vec<_>>()
            .join(",");
        let sd = if self.sd_blocks.is_empty() { "none".to_string() } else { self.sd_blocks.to_string() };
        let sa = if self.sa_blocks.is_empty() { "none".to_string() } else { self.sa_blocks.to_string() };
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "mu={}", self.mu);
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "epsilon={eps}");
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "grad_clip={}", self.grad_clip);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "sd_blocks={sd}");
        let _ = writeln!(s, "sa_blocks={sa}");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "channels={}", join(&self.channels));
        let _ = writeln!(s, "style_hidden={}", join(&self.style_hidden));
        let _ = writeln!(s, "attention_conv={}", self.attention_conv);
        let _ = writeln!(s, "attention_hidden={}", self.attention_hidden);
        let _ = writeln!(s, "batch=1");
        s
    }
}

/// The four component configurations compared in an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    SourceOnly,
    SdOnly,
    SaOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SourceOnly, Variant::SdOnly, Variant::SaOnly, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::SdOnly => "sd-only",
            Variant::SaOnly => "sa-only",
            Variant::Full => "sd+sa",
        }
    }

    /// `base` with the components this variant disables switched off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if matches!(self, Variant::SourceOnly | Variant::SaOnly) {
            c.lambda = 0.0;
            c.sd_blocks = BlockSet::EMPTY;
        }
        if matches!(self, Variant::SourceOnly | Variant::SdOnly) {
            c.mu = 0.0;
            c.sa_blocks = BlockSet::EMPTY;
        }
        c
    }
}
