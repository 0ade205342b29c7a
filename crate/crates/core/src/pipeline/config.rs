//! One point of the distillation search space, its text format and the
//! named presets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugOp, AugPolicy, LambdaDist};
use crate::error::{Error, Result};
use crate::losses::{InterLossKind, PredLossKind};
use crate::mapping::MappingStrategy;
use crate::mi::critic::CriticArch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LossWeights {
    /// `β₁ = β₂ = 1`, `γ₁ = γ₂ = ½` with augmentation; without it only `β₁`.
    pub fn defaults(augmenting: bool) -> Self {
        if augmenting {
            Self {
                beta1: 1.0,
                beta2: 1.0,
                gamma1: 0.5,
                gamma2: 0.5,
            }
        } else {
            Self {
                beta1: 1.0,
                beta2: 0.0,
                gamma1: 0.0,
                gamma2: 0.0,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentShape {
    pub layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillerConfig {
    pub inter_loss: InterLossKind,
    /// Scales every mapping weight `m_ij`; 0 gives prediction-only KD.
    pub inter_weight: f64,
    pub pred_loss: PredLossKind,
    pub mapping: MappingStrategy,
    pub aug: AugPolicy,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub student: StudentShape,
    pub critic: CriticArch,
}

impl Default for DistillerConfig {
    /// Controlled-experiment defaults: MI-α (α = 0.9), Skip, no augmentation,
    /// batch 16, learning rate 5e-5, 20 epochs.
    fn default() -> Self {
        Self {
            inter_loss: InterLossKind::MiAlpha { alpha: 0.9 },
            inter_weight: 1.0,
            pred_loss: PredLossKind::Ce,
            mapping: MappingStrategy::Skip,
            aug: AugPolicy::default(),
            weights: LossWeights::defaults(false),
            epochs: 20,
            batch_size: 16,
            learning_rate: 5e-5,
            seed: 0,
            student: StudentShape { layers: 2, width: 16 },
            critic: CriticArch::desk(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["tinybert-style", "bert-emd", "mixkd"];

impl DistillerConfig {
    /// Configurations of earlier pipelines expressed in this space.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "tinybert-style" => Self {
                pred_loss: PredLossKind::Ce,
                inter_loss: InterLossKind::Mse,
                mapping: MappingStrategy::Skip,
                aug: AugPolicy::new(vec![AugOp::Ca]),
                weights: LossWeights::defaults(true),
                ..base
            },
            "bert-emd" => Self {
                pred_loss: PredLossKind::Ce,
                inter_loss: InterLossKind::Mse,
                mapping: MappingStrategy::Emd,
                ..base
            },
            "mixkd" => Self {
                pred_loss: PredLossKind::Ce,
                inter_weight: 0.0,
                aug: AugPolicy::new(vec![AugOp::Mixup]),
                weights: LossWeights::defaults(true),
                ..base
            },
            other => return Err(Error::config(format!("unknown preset '{other}'"))),
        };
        Ok(cfg)
    }

    /// Swaps the augmentation policy and resets the weights to the matching
    /// defaults.
    pub fn with_aug(mut self, aug: AugPolicy) -> Self {
        self.weights = LossWeights::defaults(!aug.is_empty());
        self.aug = aug;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.inter_loss.validate()?;
        self.aug.validate()?;
        let w = &self.weights;
        for (name, v) in [
            ("inter_loss.weight", self.inter_weight),
            ("weights.beta1", w.beta1),
            ("weights.beta2", w.beta2),
            ("weights.gamma1", w.gamma1),
            ("weights.gamma2", w.gamma2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be a nonnegative number")));
            }
        }
        if self.aug.is_empty() && (w.beta2 != 0.0 || w.gamma2 != 0.0) {
            return Err(Error::config(
                "beta2/gamma2 weight augmented samples but no augmentation is configured",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.inter_loss.is_mi() && self.inter_weight > 0.0 && self.batch_size < 2 {
            return Err(Error::config("MI-alpha needs train.batch_size >= 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if self.student.layers == 0 || self.student.width == 0 {
            return Err(Error::config("student sizes must be positive"));
        }
        if !self.student.width.is_multiple_of(2) {
            return Err(Error::config("student.width must be even"));
        }
        Ok(())
    }

    /// Parses the `key = value` format (see [`CONFIG_KEYS`]).
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_kv(text)?)
    }

    /// Builds a config from parsed keys; keys outside the distillation
    /// namespaces are ignored so one file can also carry CLI settings.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for k in map.keys() {
            let ns = k.split('.').next().unwrap_or("");
            if DISTILL_NAMESPACES.contains(&ns) && !CONFIG_KEYS.iter().any(|(key, _)| key == k) {
                return Err(Error::config(format!("unknown config key '{k}'")));
            }
        }
        let mut cfg = match map.get("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let get = |k: &str| map.get(k).map(String::as_str);
        if let Some(kind) = get("inter_loss.kind") {
            cfg.inter_loss = match kind.to_ascii_lowercase().as_str() {
                "mi_alpha" | "mi-alpha" => InterLossKind::MiAlpha {
                    alpha: cfg.inter_loss.alpha().unwrap_or(0.9),
                },
                _ => kind.parse()?,
            };
        }
        if let Some(a) = get("inter_loss.alpha") {
            let alpha = num(a, "inter_loss.alpha")?;
            match &mut cfg.inter_loss {
                InterLossKind::MiAlpha { alpha: x } => *x = alpha,
                _ => return Err(Error::config("inter_loss.alpha is only valid for MI_alpha")),
            }
        }
        if let Some(v) = get("inter_loss.weight") {
            cfg.inter_weight = num(v, "inter_loss.weight")?;
        }
        if let Some(v) = get("pred_loss") {
            cfg.pred_loss = v.parse()?;
        }
        if let Some(v) = get("mapping") {
            cfg.mapping = v.parse()?;
        }
        let mut aug = cfg.aug.clone();
        let mut aug_changed = false;
        if let Some(v) = get("aug.ops") {
            aug.ops = parse_ops(v)?;
            aug_changed = true;
        }
        if let Some(v) = get("aug.ra_swap") {
            aug.ra_swap = num(v, "aug.ra_swap")?;
        }
        if let Some(v) = get("aug.ra_replace") {
            aug.ra_replace = num(v, "aug.ra_replace")?;
        }
        if let Some(v) = get("aug.ca_mask") {
            aug.ca_mask = num(v, "aug.ca_mask")?;
        }
        if let Some(v) = get("aug.lambda") {
            aug.lambda = parse_lambda(v)?;
        }
        if aug_changed {
            cfg = cfg.with_aug(aug);
        } else {
            cfg.aug = aug;
        }
        let w = &mut cfg.weights;
        for (key, slot) in [
            ("weights.beta1", &mut w.beta1),
            ("weights.beta2", &mut w.beta2),
            ("weights.gamma1", &mut w.gamma1),
            ("weights.gamma2", &mut w.gamma2),
        ] {
            if let Some(v) = get(key) {
                *slot = num(v, key)?;
            }
        }
        if let Some(v) = get("train.epochs") {
            cfg.epochs = int(v, "train.epochs")?;
        }
        if let Some(v) = get("train.batch_size") {
            cfg.batch_size = int(v, "train.batch_size")?;
        }
        if let Some(v) = get("train.learning_rate") {
            cfg.learning_rate = num(v, "train.learning_rate")?;
        }
        if let Some(v) = get("seed") {
            cfg.seed = int(v, "seed")? as u64;
        }
        if let Some(v) = get("student.layers") {
            cfg.student.layers = int(v, "student.layers")?;
        }
        if let Some(v) = get("student.width") {
            cfg.student.width = int(v, "student.width")?;
        }
        for (key, slot) in [
            ("critic.layers", &mut cfg.critic.layers),
            ("critic.width", &mut cfg.critic.width),
            ("critic.heads", &mut cfg.critic.heads),
            ("critic.ff", &mut cfg.critic.ff),
        ] {
            if let Some(v) = get(key) {
                *slot = int(v, key)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("inter_loss.kind = {}", inter_kind_name(&self.inter_loss)),
        ];
        if let Some(a) = self.inter_loss.alpha() {
            lines.push(format!("inter_loss.alpha = {a}"));
        }
        lines.extend([
            format!("inter_loss.weight = {}", self.inter_weight),
            format!("pred_loss = {}", self.pred_loss),
            format!("mapping = {}", self.mapping),
            format!("aug.ops = {}", self.aug.label()),
            format!("aug.ra_swap = {}", self.aug.ra_swap),
            format!("aug.ra_replace = {}", self.aug.ra_replace),
            format!("aug.ca_mask = {}", self.aug.ca_mask),
            format!(
                "aug.lambda = {}",
                match self.aug.lambda {
                    LambdaDist::Uniform => "uniform".to_string(),
                    LambdaDist::Beta { a } => format!("beta:{a}"),
                }
            ),
            format!("weights.beta1 = {}", self.weights.beta1),
            format!("weights.beta2 = {}", self.weights.beta2),
            format!("weights.gamma1 = {}", self.weights.gamma1),
            format!("weights.gamma2 = {}", self.weights.gamma2),
            format!("train.epochs = {}", self.epochs),
            format!("train.batch_size = {}", self.batch_size),
            format!("train.learning_rate = {}", self.learning_rate),
            format!("seed = {}", self.seed),
            format!("student.layers = {}", self.student.layers),
            format!("student.width = {}", self.student.width),
            format!("critic.layers = {}", self.critic.layers),
            format!("critic.width = {}", self.critic.width),
            format!("critic.heads = {}", self.critic.heads),
            format!("critic.ff = {}", self.critic.ff),
        ]);
        lines.join("\n") + "\n"
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn inter_kind_name(k: &InterLossKind) -> String {
    match k {
        InterLossKind::MiAlpha { .. } => "MI_alpha".into(),
        other => other.to_string(),
    }
}

const DISTILL_NAMESPACES: [&str; 9] = [
    "preset",
    "inter_loss",
    "pred_loss",
    "mapping",
    "aug",
    "weights",
    "train",
    "student",
    "critic",
];

/// Every key read by [`DistillerConfig::from_map`], with a description.
pub const CONFIG_KEYS: [(&str, &str); 25] = [
    ("preset", "tinybert-style | bert-emd | mixkd; applied before other keys"),
    ("inter_loss.kind", "MSE | L2 | Cos | PKD | CE | MI_alpha"),
    ("inter_loss.alpha", "alpha in [0, 1] for MI_alpha"),
    ("inter_loss.weight", "scale on every mapping weight; 0 disables the term"),
    ("pred_loss", "CE | MSE"),
    ("mapping", "Skip | Last | EMD"),
    ("aug.ops", "comma or plus separated ops from CA, RA, BT, Mixup, or none"),
    ("aug.ra_swap", "RA adjacent-swap probability"),
    ("aug.ra_replace", "RA synonym-replacement probability"),
    ("aug.ca_mask", "CA mask probability"),
    ("aug.lambda", "uniform | beta:<a>"),
    ("weights.beta1", "teacher term on original inputs"),
    ("weights.beta2", "teacher term on augmented inputs"),
    ("weights.gamma1", "label term on original inputs"),
    ("weights.gamma2", "label term on augmented inputs"),
    ("train.epochs", "passes over the training split"),
    ("train.batch_size", "examples per step"),
    ("train.learning_rate", "Adam step size"),
    ("seed", "base seed of every random stream"),
    ("student.layers", "student depth"),
    ("student.width", "student hidden width"),
    ("critic.layers", "critic blocks"),
    ("critic.width", "critic hidden width"),
    ("critic.heads", "critic heads"),
    ("critic.ff", "critic feed-forward width"),
];

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::config(format!("line {}: empty key or value", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(map)
}

pub(crate) fn num(v: &str, key: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(format!("{key}: '{v}' is not a number")))
}

pub(crate) fn int(v: &str, key: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::config(format!("{key}: '{v}' is not a nonnegative integer")))
}

pub fn parse_ops(v: &str) -> Result<Vec<AugOp>> {
    let v = v.trim();
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split([',', '+']).map(str::parse).collect()
}

fn parse_lambda(v: &str) -> Result<LambdaDist> {
    if v.eq_ignore_ascii_case("uniform") {
        return Ok(LambdaDist::Uniform);
    }
    let a = v
        .strip_prefix("beta:")
        .ok_or_else(|| Error::config(format!("aug.lambda: expected uniform or beta:<a>, got '{v}'")))?;
    Ok(LambdaDist::Beta {
        a: num(a, "aug.lambda")?,
    })
}
