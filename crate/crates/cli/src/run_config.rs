//! Resolved run configuration: preset, then config file, then `--set`
//! overrides, then dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use msfnet::kv;
use msfnet::train::{LossConfig, TrainConfig};
use msfnet::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size network
    Default,
    /// Stages 8/16/32/64, J=2, fusion width 16
    Tiny,
    /// Stages 8/16/32/64 at strides 2/4/8/16, J=2, fusion width 32; fits 64×64 inputs
    Micro,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Micro => ModelConfig::micro(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Whether `train.crop` was given explicitly.
    pub crop_set: bool,
    pub channel_means_set: bool,
}

impl RunConfig {
    pub fn new(preset: Preset) -> Self {
        let model = preset.model();
        let loss = LossConfig {
            cbs_output_size: model.cbs_output_size,
            ..LossConfig::default()
        };
        Self {
            model,
            train: TrainConfig::default(),
            loss,
            crop_set: false,
            channel_means_set: false,
        }
    }

    /// Routes one key to its section; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let section = key.split('.').next().unwrap_or("");
        match section {
            "model" => self.model.set(key, value)?,
            "train" => {
                self.train.set(key, value)?;
                self.crop_set |= key == "train.crop";
                self.channel_means_set |= key == "train.channel_means";
            }
            "loss" | "boundary" => self.loss.set(key, value)?,
            _ => bail!("unknown configuration key `{key}`"),
        }
        if key == "model.cbs_output_size" {
            self.loss.cbs_output_size = self.model.cbs_output_size;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let pairs = kv::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        for (k, v) in pairs {
            self.set(&k, &v)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        Ok(())
    }

    /// `key=value` strings from `--set`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects key=value, got `{o}`");
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_kv();
        out.extend(self.train.to_kv());
        out.extend(self.loss.to_kv());
        out
    }
}
