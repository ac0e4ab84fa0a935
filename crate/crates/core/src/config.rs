//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error so typos do not silently fall back to defaults. See
//! `configs/reference.conf` for every key.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grounding::{Decode, SinkMode, Strategy};
use crate::labeling::LabelMode;
use crate::toymodel::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Crop side for two-step inference, in step-one patches.
    pub crop_patches: u32,
    pub zoom: f64,
    /// Also train on a zoomed crop around each target.
    pub zoom_augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            crop_patches: 4,
            zoom: 2.0,
            zoom_augment: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "layers" => m.layers = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "d_model" => m.d_model = parse_num(key, value)?,
            "d_ff" => m.d_ff = parse_num(key, value)?,
            "max_rows" => m.max_rows = parse_num(key, value)?,
            "max_cols" => m.max_cols = parse_num(key, value)?,
            "max_query_len" => m.max_query_len = parse_num(key, value)?,
            "model_seed" => m.seed = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "alpha" => t.alpha = parse_num(key, value)?,
            "labels" => {
                t.label_mode = match value {
                    "weighted" => LabelMode::Weighted,
                    "flat" => LabelMode::Flat,
                    _ => return Err(Error::Config(format!("`labels`: expected weighted|flat, got `{value}`"))),
                }
            }
            "strategy" => t.strategy.strategy = value.parse::<Strategy>()?,
            "sink_mode" => t.strategy.sink_mode = value.parse::<SinkMode>()?,
            "sink_k" => t.strategy.sink_k = parse_num(key, value)?,
            "decode" => t.strategy.decode = value.parse::<Decode>()?,
            "stop_grad_weights" => t.stop_grad_weights = parse_bool(key, value)?,
            "train_seed" => t.seed = parse_num(key, value)?,
            "eval_every" => t.eval_every = parse_num(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_num(key, value)?,
            "cosine_decay" => t.cosine_decay = parse_bool(key, value)?,
            "crop_patches" => self.crop_patches = parse_num(key, value)?,
            "zoom" => self.zoom = parse_num(key, value)?,
            "zoom_augment" => self.zoom_augment = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.crop_patches == 0 {
            return Err(Error::Config("crop_patches must be at least 1".into()));
        }
        if !(self.zoom.is_finite() && self.zoom >= 1.0) {
            return Err(Error::Config(format!("zoom must be >= 1, got {}", self.zoom)));
        }
        Ok(())
    }
}
