//! Flat `key = value` run configuration covering model and training fields.
//!
//! Blank lines and `#` comments are ignored. Keys may appear once. Every
//! [`ModelConfig`] and [`TrainConfig`] field is addressable; `corpus` is
//! required.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const TRAIN_KEYS: [&str; 15] = [
    "base_lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "warmup_epochs",
    "seed",
    "betas",
    "eps",
    "min_lr",
    "corpus",
    "crop_size",
    "max_steps",
    "checkpoint_every",
    "mask_strategy",
    "entropy_source",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "base_lr" => t.base_lr = num(value)?,
            "weight_decay" => t.weight_decay = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "warmup_epochs" => t.warmup_epochs = num(value)?,
            "seed" => t.seed = num(value)?,
            "betas" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| format!("betas needs two comma-separated values, got `{value}`"))?;
                t.betas = (num(a.trim())?, num(b.trim())?);
            }
            "eps" => t.eps = num(value)?,
            "min_lr" => t.min_lr = num(value)?,
            "corpus" => t.corpus = value.into(),
            "crop_size" => t.crop_size = num(value)?,
            "max_steps" => t.max_steps = if value == "none" { None } else { Some(num(value)?) },
            "checkpoint_every" => t.checkpoint_every = num(value)?,
            "mask_strategy" => t.mask_strategy = value.parse().map_err(|e: Error| e.to_string())?,
            "entropy_source" => t.entropy_source = value.parse().map_err(|e: Error| e.to_string())?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(|m| err(format!("{k}: {m}")))?;
            seen.push(k.to_string());
        }
        if !seen.iter().any(|k| k == "corpus") {
            return Err(Error::MissingKey("corpus".into()));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Parses a file; a relative `corpus` is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.train.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.train.corpus = dir.join(&cfg.train.corpus);
            }
        }
        Ok(cfg)
    }
}
