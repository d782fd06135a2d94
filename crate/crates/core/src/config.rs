//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 3
//! model.image_size = 32
//! loss.margin = 1.0
//! train.arm = full
//! data.families = splice, warp
//! detector.coverage = 0.95
//! ```
//!
//! The root `seed` drives model initialisation and training; `data.seed`
//! drives dataset generation.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{Family, SyntheticSpec};
use crate::training::{Arm, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

pub const KEYS: &[&str] = &[
    "seed",
    "model.image_size",
    "model.in_channels",
    "model.num_scales",
    "model.base_channels",
    "model.bottleneck_channels",
    "model.patch_size",
    "model.mlp_hidden",
    "loss.margin",
    "loss.lambda",
    "loss.l3_temperature",
    "loss.printed_l2_sign",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.epochs",
    "train.arm",
    "train.augment",
    "train.calibrate_real_only",
    "detector.coverage",
    "data.image_size",
    "data.n_train",
    "data.n_val",
    "data.n_test",
    "data.families",
    "data.seed",
    "data.tamper_area_min",
    "data.tamper_area_max",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.image_size" => self.model.image_size = parse(key, value)?,
            "model.in_channels" => self.model.in_channels = parse(key, value)?,
            "model.num_scales" => self.model.num_scales = parse(key, value)?,
            "model.base_channels" => self.model.base_channels = parse(key, value)?,
            "model.bottleneck_channels" => self.model.bottleneck_channels = parse(key, value)?,
            "model.patch_size" => self.model.patch_size = parse(key, value)?,
            "model.mlp_hidden" => self.model.mlp_hidden = parse(key, value)?,
            "loss.margin" => self.train.loss.margin = parse(key, value)?,
            "loss.lambda" => self.train.loss.lambda = parse(key, value)?,
            "loss.l3_temperature" => self.train.loss.l3_temperature = parse(key, value)?,
            "loss.printed_l2_sign" => self.train.loss.printed_l2_sign = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.arm" => {
                self.train.arm = value
                    .parse::<Arm>()
                    .map_err(|e| Error::Config(format!("{key}: {}", strip(e))))?
            }
            "train.augment" => self.train.augment = parse(key, value)?,
            "train.calibrate_real_only" => self.train.calibrate_real_only = parse(key, value)?,
            "detector.coverage" => self.train.coverage = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.n_train" => self.data.n_train = parse(key, value)?,
            "data.n_val" => self.data.n_val = parse(key, value)?,
            "data.n_test" => self.data.n_test = parse(key, value)?,
            "data.families" => {
                self.data.families = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Family>().map_err(|e| Error::Config(format!("{key}: {}", strip(e)))))
                    .collect::<Result<_>>()?
            }
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.tamper_area_min" => self.data.tamper_area_frac.0 = parse(key, value)?,
            "data.tamper_area_max" => self.data.tamper_area_frac.1 = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Model and training configs with the root seed applied.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Every key with its resolved value, in the parser's format.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let families: Vec<&str> = d.families.iter().map(|f| f.as_str()).collect();
        let values: Vec<String> = vec![
            self.seed.to_string(),
            m.image_size.to_string(),
            m.in_channels.to_string(),
            m.num_scales.to_string(),
            m.base_channels.to_string(),
            m.bottleneck_channels.to_string(),
            m.patch_size.to_string(),
            m.mlp_hidden.to_string(),
            t.loss.margin.to_string(),
            t.loss.lambda.to_string(),
            t.loss.l3_temperature.to_string(),
            t.loss.printed_l2_sign.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.epochs.to_string(),
            t.arm.as_str().to_string(),
            t.augment.to_string(),
            t.calibrate_real_only.to_string(),
            t.coverage.to_string(),
            d.image_size.to_string(),
            d.n_train.to_string(),
            d.n_val.to_string(),
            d.n_test.to_string(),
            families.join(", "),
            d.seed.to_string(),
            d.tamper_area_frac.0.to_string(),
            d.tamper_area_frac.1.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let cfg = RunConfig::parse(
            "# run\nseed = 7\nloss.margin = 2.0  # wider\n\ntrain.arm = ae_lsa_rl\ndata.families = splice, texture\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.loss.margin, 2.0);
        assert_eq!(cfg.train.arm, Arm::AeLsaRl);
        assert_eq!(cfg.data.families, vec![Family::Splice, Family::Texture]);
        assert_eq!(cfg.resolved_model().seed, 7);
        assert_eq!(cfg.resolved_train().seed, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        let err = RunConfig::parse("loss.margn = 1").unwrap_err();
        assert!(err.to_string().contains("loss.margn"));
        let err = RunConfig::parse("data.families = splice, morph").unwrap_err();
        assert!(err.to_string().contains("data.families"));
        assert!(RunConfig::parse("train.lr = fast").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.epochs=3").unwrap();
        cfg.apply_override("data.tamper_area_max = 0.2").unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }
}
