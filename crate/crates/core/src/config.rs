//! Run configuration as plain `key=value` text.
//!
//! Layering is defaults, then a config file, then explicit overrides; each
//! layer is just a sequence of `set` calls.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{LiqssError, Result};
use crate::model::LiqssConfig;
use crate::train::TrainConfig;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LiqssError::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(LiqssError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| LiqssError::Config(format!("invalid value {value:?} for {key}")))
}

/// Comma-separated list, e.g. `1,1,13`.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|s| parse_num(key, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic { length: usize },
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: LiqssConfig,
    pub train: TrainConfig,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub epsilon: f64,
    pub data: DataSource,
    pub target: String,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: LiqssConfig::default(),
            train: TrainConfig::default(),
            train_ratio: 0.70,
            val_ratio: 0.15,
            epsilon: crate::telemetry::STD_EPSILON,
            data: DataSource::Synthetic { length: 5000 },
            target: "rsrp".to_string(),
            out_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// One seed drives model init, shuffling and dropout.
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.model.seed = parse_num(key, value)?;
            self.train.seed = self.model.seed;
            return Ok(());
        }
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "train_ratio" => self.train_ratio = parse_num(key, value)?,
            "val_ratio" => self.val_ratio = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "data_csv" => self.data = DataSource::Csv(PathBuf::from(value)),
            "synthetic_length" => {
                self.data = DataSource::Synthetic {
                    length: parse_num(key, value)?,
                }
            }
            "target" => self.target = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(LiqssError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv_text(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LiqssError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            cfg.apply_file(p)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, va) = (self.train_ratio, self.val_ratio);
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return Err(LiqssError::InvalidRatio { train: tr, val: va });
        }
        if !(self.epsilon > 0.0) {
            return Err(LiqssError::Config("epsilon must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        out.extend(self.train.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.push(("train_ratio".into(), self.train_ratio.to_string()));
        out.push(("val_ratio".into(), self.val_ratio.to_string()));
        out.push(("epsilon".into(), self.epsilon.to_string()));
        match &self.data {
            DataSource::Csv(p) => out.push(("data_csv".into(), p.display().to_string())),
            DataSource::Synthetic { length } => out.push(("synthetic_length".into(), length.to_string())),
        }
        out.push(("target".into(), self.target.clone()));
        out.push(("out_dir".into(), self.out_dir.display().to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
