//! Experiment configuration: one JSON document per run.
//!
//! Every section has a desk-scale default, so a config file only needs the
//! fields it changes. `key.path=value` overrides are applied to the JSON
//! tree before deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::csi_data::ChannelGenConfig;
use crate::gain_quant::GainQuantizerConfig;
use crate::nnet::{AdamConfig, AutoencoderConfig};
use crate::shape_quant::SelectionRule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ShapeGain,
    FlatVq,
    ScalarAblation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    #[default]
    Grassmannian,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 2048,
            val_count: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// `M`.
    pub latent_dim: usize,
    pub leaky_slope: f64,
    /// Scale on the encoder output layer init, keeping initial latents small.
    pub latent_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_hidden: vec![512, 256],
            dec_hidden: vec![256, 512],
            latent_dim: 32,
            leaky_slope: 0.01,
            latent_init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// Sub-vector dimension `D`.
    pub d: usize,
    pub b_mag: u32,
    pub a: f64,
    pub mu: f64,
    pub tau: f64,
    /// Direction bits per level, strictly decreasing. Its length is the
    /// number of levels.
    pub shape_bits: Vec<u32>,
    pub init: CodebookInit,
    /// Keep the shape codebook fixed at its initial value.
    pub frozen: bool,
    pub selection: SelectionRule,
    /// Codebook bits per sub-vector in `flat_vq` mode.
    pub flat_bits: u32,
    /// Bits per latent entry in `scalar_ablation` mode.
    pub scalar_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            d: 8,
            b_mag: 3,
            a: 0.6,
            mu: 255.0,
            tau: 8.0,
            shape_bits: vec![5, 4],
            init: CodebookInit::Grassmannian,
            frozen: false,
            selection: SelectionRule::Chordal,
            flat_bits: 8,
            scalar_bits: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs_per_level: usize,
    /// Stop a level early after this many epochs without a validation gain.
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            beta: 0.25,
            lr: 1e-3,
            epochs_per_level: 60,
            patience: 10,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Seeds model init, codebook init and batch order. The dataset has its
    /// own seed under `channel`.
    pub seed: u64,
    pub channel: ChannelGenConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ShapeGain,
            seed: 1,
            channel: ChannelGenConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            quant: QuantConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(s)?, &[])
    }

    /// Reads a config file (or starts from defaults when `path` is `None`),
    /// applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => serde_json::to_value(Self::default())?,
        };
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        if value.is_object() {
            // fill in omitted sections so overrides can address any key
            let mut full = serde_json::to_value(Self::default())?;
            merge(&mut full, value);
            value = full;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate().map_err(|e| prefix("channel", e))?;
        let (q, t, m) = (&self.quant, &self.train, &self.model);
        if self.data.train_count == 0 {
            return Err(Error::config("data.train_count", "must be positive"));
        }
        if self.data.val_count == 0 {
            return Err(Error::config("data.val_count", "must be positive"));
        }
        self.autoencoder_config().validate()?;
        if q.d == 0 {
            return Err(Error::config("quant.d", "must be positive"));
        }
        if m.latent_dim % q.d != 0 {
            return Err(Error::config(
                "model.latent_dim",
                format!("{} is not divisible by quant.d = {}", m.latent_dim, q.d),
            ));
        }
        self.gain_config().validate().map_err(|e| prefix("quant", e))?;
        if q.shape_bits.is_empty() {
            return Err(Error::config("quant.shape_bits", "need at least one level"));
        }
        if q.shape_bits.iter().any(|&b| b == 0 || b > 16) {
            return Err(Error::config("quant.shape_bits", "each entry must be in [1, 16]"));
        }
        if q.shape_bits.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("quant.shape_bits", "must be strictly decreasing"));
        }
        if q.flat_bits == 0 || q.flat_bits > 16 {
            return Err(Error::config("quant.flat_bits", "must be in [1, 16]"));
        }
        if q.scalar_bits == 0 || q.scalar_bits > 16 {
            return Err(Error::config("quant.scalar_bits", "must be in [1, 16]"));
        }
        if !(t.gamma > 0.0 && t.gamma <= 1.0) {
            return Err(Error::config("train.gamma", "must be in (0, 1]"));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) {
            return Err(Error::config("train.beta", "must be non-negative"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if t.epochs_per_level == 0 {
            return Err(Error::config("train.epochs_per_level", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }

    /// `2 · Ñ_c · N_t`.
    pub fn input_dim(&self) -> usize {
        2 * self.channel.n_c_trunc * self.channel.n_t
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            input_dim: self.input_dim(),
            enc_hidden: self.model.enc_hidden.clone(),
            latent_dim: self.model.latent_dim,
            dec_hidden: self.model.dec_hidden.clone(),
            leaky_slope: self.model.leaky_slope,
            latent_init_scale: self.model.latent_init_scale,
        }
    }

    pub fn gain_config(&self) -> GainQuantizerConfig {
        GainQuantizerConfig {
            a: self.quant.a,
            b_mag: self.quant.b_mag,
            mu: self.quant.mu,
            d: self.quant.d,
            tau: self.quant.tau,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            ..AdamConfig::default()
        }
    }

    /// Number of trained rates: `L` for shape-gain, one otherwise.
    pub fn num_levels(&self) -> usize {
        match self.mode {
            Mode::ShapeGain => self.quant.shape_bits.len(),
            _ => 1,
        }
    }

    pub fn sub_vectors(&self) -> usize {
        self.model.latent_dim / self.quant.d
    }

    /// Feedback payload in bits for one CSI sample at `level` (0-based).
    pub fn feedback_bits(&self, level: usize) -> u64 {
        let n = self.sub_vectors() as u64;
        match self.mode {
            Mode::ShapeGain => n * (self.quant.b_mag + self.quant.shape_bits[level]) as u64,
            Mode::FlatVq => n * self.quant.flat_bits as u64,
            Mode::ScalarAblation => self.model.latent_dim as u64 * self.quant.scalar_bits as u64,
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::config(format!("{section}.{field}"), msg),
        other => other,
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Only existing keys can be set.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let path = path.trim();
    let mut cur = &mut *root;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::config(path, "unknown key"))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
