//! Hyperparameters and the flat `key = value` run-configuration format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::error::{Error, Result};
use crate::head::{ClassMix, NormMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneKind,
    pub backbone_weights: Option<PathBuf>,
    pub image_size: usize,
    pub d_prime: usize,
    /// Channel width of the four hidden reduction layers.
    pub reduction_width: usize,
    pub batch_norm: bool,
    pub temperature: f64,
    pub head_norm: NormMode,
    pub head_mix: ClassMix,
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    pub negatives_per_anchor: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub k: usize,
    /// Minimum anomalous slots per training batch.
    pub anomaly_slots: usize,
    /// Share of training normals held out for early stopping.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            backbone_weights: None,
            image_size: 224,
            d_prime: 128,
            reduction_width: 256,
            batch_norm: true,
            temperature: 1.0,
            head_norm: NormMode::Row,
            head_mix: ClassMix::PerClass,
            lambda: 1.0,
            mu: 0.2,
            beta: 1.2,
            negatives_per_anchor: 1,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            k: 8,
            anomaly_slots: 4,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size as f64),
            ("d_prime", self.d_prime as f64),
            ("reduction_width", self.reduction_width as f64),
            ("temperature", self.temperature),
            ("mu", self.mu),
            ("beta", self.beta),
            ("lr", self.lr),
            ("batch_size", self.batch_size as f64),
            ("max_epochs", self.max_epochs as f64),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if self.anomaly_slots >= self.batch_size {
            return Err(Error::Config("anomaly_slots must be smaller than batch_size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Probabilities from absolute gradient values.
    #[default]
    Abs,
    /// Probabilities from a softmax over raw values.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Raw score gradients `∂ŝ/∂z`.
    #[default]
    Gradient,
    /// Gradients multiplied by the activations `z`.
    GradTimesActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretConfig {
    /// Number of maps aggregated; `None` means `min(8, D′)`.
    pub top_h: Option<usize>,
    pub sigma: f64,
    pub entropy_mode: EntropyMode,
    pub map_source: MapSource,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            top_h: None,
            sigma: 4.0,
            entropy_mode: EntropyMode::Abs,
            map_source: MapSource::Gradient,
        }
    }
}

impl InterpretConfig {
    pub fn resolved_top_h(&self, d_prime: usize) -> usize {
        self.top_h.unwrap_or(8.min(d_prime))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// One ranking over every pixel of every image.
    #[default]
    Pooled,
    /// Mean of per-image AUROCs over images with both pixel classes.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelSource {
    #[default]
    Heatmap,
    /// The upsampled anomaly-branch score map.
    ScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub road_fractions: Vec<f64>,
    pub noise_std: f64,
    pub pixel_pooling: PixelPooling,
    pub pixel_source: PixelSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            road_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            noise_std: 0.01,
            pixel_pooling: PixelPooling::Pooled,
            pixel_source: PixelSource::Heatmap,
        }
    }
}

/// Every setting of a run, merged from a config file and command-line overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
}

/// Keys accepted in config files and `--set` overrides.
pub const CONFIG_KEYS: &[&str] = &[
    "backbone",
    "backbone_weights",
    "image_size",
    "d_prime",
    "reduction_width",
    "batch_norm",
    "temperature",
    "head_norm",
    "head_mix",
    "lambda",
    "mu",
    "beta",
    "negatives_per_anchor",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "k",
    "anomaly_slots",
    "holdout_fraction",
    "top_h",
    "sigma",
    "entropy_mode",
    "map_source",
    "road_fractions",
    "noise_std",
    "pixel_pooling",
    "pixel_source",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "backbone" => t.backbone = v.parse()?,
            "backbone_weights" => t.backbone_weights = Some(PathBuf::from(v)),
            "image_size" => t.image_size = parse(key, v)?,
            "d_prime" => t.d_prime = parse(key, v)?,
            "reduction_width" => t.reduction_width = parse(key, v)?,
            "batch_norm" => t.batch_norm = parse(key, v)?,
            "temperature" => t.temperature = parse(key, v)?,
            "head_norm" => t.head_norm = parse_enum(key, v)?,
            "head_mix" => t.head_mix = parse_enum(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "mu" => t.mu = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "negatives_per_anchor" => t.negatives_per_anchor = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "k" => t.k = parse(key, v)?,
            "anomaly_slots" => t.anomaly_slots = parse(key, v)?,
            "holdout_fraction" => t.holdout_fraction = parse(key, v)?,
            "top_h" => self.interpret.top_h = Some(parse(key, v)?),
            "sigma" => self.interpret.sigma = parse(key, v)?,
            "entropy_mode" => self.interpret.entropy_mode = parse_enum(key, v)?,
            "map_source" => self.interpret.map_source = parse_enum(key, v)?,
            "road_fractions" => {
                self.eval.road_fractions = v
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "noise_std" => self.eval.noise_std = parse(key, v)?,
            "pixel_pooling" => self.eval.pixel_pooling = parse_enum(key, v)?,
            "pixel_source" => self.eval.pixel_source = parse_enum(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let top_h = self.interpret.resolved_top_h(self.train.d_prime);
        if top_h == 0 || top_h > self.train.d_prime {
            return Err(Error::Config(format!("top_h must lie in 1..={}", self.train.d_prime)));
        }
        if self.interpret.sigma < 0.0 {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        if self.eval.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.eval.road_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("road_fractions must lie in [0, 1]".into()));
        }
        if self.train.backbone == BackboneKind::Vgg11 && self.train.backbone_weights.is_none() {
            return Err(Error::Config("backbone=vgg11 requires backbone_weights".into()));
        }
        Ok(())
    }
}
