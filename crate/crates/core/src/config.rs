//! Model and training configuration, including the flat `key = value`
//! config-file format read by the trainer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub style_dim: usize,
    pub flow_steps: usize,
    pub coupling_hidden: usize,
    pub logscale_clamp: f64,
    pub retouch_width: usize,
    pub modulation_hidden: usize,
    pub encoder_steps: usize,
    pub encoder_widths: Vec<usize>,
    /// Channel widths of the stride-2 condition extractor; the last one is
    /// the condition dimensionality.
    pub condition_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            style_dim: 16,
            flow_steps: 8,
            coupling_hidden: 64,
            logscale_clamp: 2.0,
            retouch_width: 64,
            modulation_hidden: 64,
            encoder_steps: 3,
            encoder_widths: vec![32, 64, 128, 128],
            condition_widths: vec![16, 32, 64, 64],
        }
    }
}

impl ModelConfig {
    /// Small widths for fast tests and examples.
    pub fn tiny(style_dim: usize, flow_steps: usize) -> Self {
        Self {
            style_dim,
            flow_steps,
            coupling_hidden: 8,
            logscale_clamp: 2.0,
            retouch_width: 8,
            modulation_hidden: 8,
            encoder_steps: 3,
            encoder_widths: vec![4, 6],
            condition_widths: vec![4, 6],
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_dim < 2 || !self.style_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "style dimension must be even and at least 2, got {}",
                self.style_dim
            )));
        }
        if !(1..=16).contains(&self.flow_steps) {
            return Err(Error::Config(format!(
                "flow step count must be within 1..=16, got {}",
                self.flow_steps
            )));
        }
        if self.encoder_steps == 0 {
            return Err(Error::Config("progressive step count must be at least 1".into()));
        }
        if self.encoder_widths.is_empty() || self.condition_widths.is_empty() {
            return Err(Error::Config("encoder and condition widths must be non-empty".into()));
        }
        let widths = [self.coupling_hidden, self.retouch_width, self.modulation_hidden];
        if widths.contains(&0)
            || self.encoder_widths.contains(&0)
            || self.condition_widths.contains(&0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.logscale_clamp > 0.0) {
            return Err(Error::Config("log-scale clamp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda: f64,
    pub n_steps_progressive: usize,
    pub total_iterations: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub style_dim: usize,
    pub flow_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            crop_size: 64,
            learning_rate: 4e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lambda: 1.0,
            n_steps_progressive: 3,
            total_iterations: 20_000,
            seed: 0,
            checkpoint_interval: 5_000,
            style_dim: 16,
            flow_steps: 8,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "crop_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "lambda",
    "n_steps_progressive",
    "total_iterations",
    "seed",
    "checkpoint_interval",
    "style_dim",
    "flow_steps",
];

fn parse_value<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for key {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("crop_size", self.crop_size as f64),
            ("learning_rate", self.learning_rate),
            ("n_steps_progressive", self.n_steps_progressive as f64),
            ("total_iterations", self.total_iterations as f64),
            ("checkpoint_interval", self.checkpoint_interval as f64),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{key} must lie in [0, 1)")));
            }
        }
        self.model_config().validate()
    }

    /// Default architecture with the dimensions this config overrides.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            style_dim: self.style_dim,
            flow_steps: self.flow_steps,
            encoder_steps: self.n_steps_progressive,
            ..ModelConfig::default()
        }
    }

    /// Applies one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "crop_size" => self.crop_size = parse_value(key, raw)?,
            "learning_rate" => self.learning_rate = parse_value(key, raw)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, raw)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, raw)?,
            "lambda" => self.lambda = parse_value(key, raw)?,
            "n_steps_progressive" => self.n_steps_progressive = parse_value(key, raw)?,
            "total_iterations" => self.total_iterations = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, raw)?,
            "style_dim" => self.style_dim = parse_value(key, raw)?,
            "flow_steps" => self.flow_steps = parse_value(key, raw)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?} (known keys: {})",
                    TRAIN_CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses the flat config format: one `key = value` per line, `#`
    /// comments, blank lines ignored. Starts from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let map = self.to_map();
        TRAIN_CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", map[*k]))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        json.as_object()
            .expect("object")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.learning_rate, 4e-5);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.999));
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.n_steps_progressive, 3);
        assert_eq!(c.model_config().flow_steps, 8);
    }

    #[test]
    fn parse_roundtrip_and_unknown_key() {
        let mut c = TrainConfig::default();
        c.batch_size = 4;
        c.learning_rate = 5e-4;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);

        let err = TrainConfig::parse("batch_size = 2\nwarmup = 10\n").unwrap_err();
        assert!(err.to_string().contains("warmup"));
        let err = TrainConfig::parse("batch_size = two").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn model_config_rejects_odd_dim() {
        let cfg = ModelConfig {
            style_dim: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
