//! Training configuration and its plain-text `key = value` form.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. The
//! `profile` key (`paper` or `toy`) resets every field to that profile's
//! defaults and is applied before any other key, wherever it appears.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::encoder::EncoderMode;
use crate::error::{Result, VigtError};
use crate::model::ModelConfig;
use crate::objectives::{LossTerms, LossWeights};
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Print a loss line every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            terms: LossTerms::ALL,
            adam: AdamConfig::default(),
            batch_size: 100,
            max_steps: 10_000,
            seed: 0,
            precision: Precision::F32,
            log_every: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in snapshot order.
pub const KEYS: &[&str] = &[
    "d_v",
    "d_q",
    "d",
    "heads",
    "clips",
    "query_len",
    "conv_kernel",
    "conv_layers",
    "layers",
    "ffn_mult",
    "dropout",
    "encoder_mode",
    "no_token",
    "final_ln",
    "lambda",
    "beta",
    "alpha",
    "loss_terms",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "max_steps",
    "seed",
    "precision",
    "log_every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| VigtError::config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(VigtError::config(format!(
            "invalid boolean {value:?} for `{key}`"
        ))),
    }
}

/// Parses `sl1+giou+cls`-style term lists (`all` is shorthand for all three).
pub fn parse_terms(value: &str) -> Result<LossTerms> {
    let mut terms = LossTerms {
        smooth_l1: false,
        giou: false,
        cls: false,
    };
    if value == "all" {
        return Ok(LossTerms::ALL);
    }
    for part in value.split('+').map(str::trim) {
        match part {
            "sl1" => terms.smooth_l1 = true,
            "giou" => terms.giou = true,
            "cls" => terms.cls = true,
            other => {
                return Err(VigtError::config(format!(
                    "unknown loss term {other:?} (expected sl1, giou, cls)"
                )))
            }
        }
    }
    terms.validate()?;
    Ok(terms)
}

impl TrainConfig {
    /// Toy profile: desk-scale model, batch 32, 2000 steps.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            batch_size: 32,
            max_steps: 2000,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(VigtError::config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.terms.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(VigtError::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "d_v" => m.d_v = parse(key, value)?,
            "d_q" => m.d_q = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "clips" | "T" => m.clips = parse(key, value)?,
            "query_len" | "L" => m.query_len = parse(key, value)?,
            "conv_kernel" => m.conv_kernel = parse(key, value)?,
            "conv_layers" => m.conv_layers = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "encoder_mode" => m.encoder_mode = value.parse::<EncoderMode>()?,
            "no_token" => m.no_token = parse_bool(key, value)?,
            "final_ln" => m.final_ln = parse_bool(key, value)?,
            "lambda" => self.weights.lambda = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "alpha" => self.weights.alpha = parse(key, value)?,
            "loss_terms" => self.terms = parse_terms(value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => {
                self.precision = value
                    .parse()
                    .map_err(|_| VigtError::config(format!("invalid precision {value:?}")))?
            }
            "log_every" => self.log_every = parse(key, value)?,
            other => return Err(VigtError::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs on top of `self`. A `profile` pair
    /// replaces `self` first.
    pub fn apply<'a>(
        mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for &(k, v) in &pairs {
            if k == "profile" {
                self = Self::profile(v)?;
            }
        }
        for &(k, v) in &pairs {
            if k != "profile" {
                self.set(k, v)?;
            }
        }
        Ok(self)
    }

    pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                VigtError::config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                ))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_kv(base: Self, text: &str) -> Result<Self> {
        let pairs = Self::parse_kv(text)?;
        base.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_kv(Self::default(), &text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "d_v" => m.d_v.to_string(),
            "d_q" => m.d_q.to_string(),
            "d" => m.d.to_string(),
            "heads" => m.heads.to_string(),
            "clips" => m.clips.to_string(),
            "query_len" => m.query_len.to_string(),
            "conv_kernel" => m.conv_kernel.to_string(),
            "conv_layers" => m.conv_layers.to_string(),
            "layers" => m.layers.to_string(),
            "ffn_mult" => m.ffn_mult.to_string(),
            "dropout" => m.dropout.to_string(),
            "encoder_mode" => m.encoder_mode.to_string(),
            "no_token" => m.no_token.to_string(),
            "final_ln" => m.final_ln.to_string(),
            "lambda" => self.weights.lambda.to_string(),
            "beta" => self.weights.beta.to_string(),
            "alpha" => self.weights.alpha.to_string(),
            "loss_terms" => self.terms.label(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each; [`TrainConfig::from_kv`]
    /// reads it back unchanged.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }
}
