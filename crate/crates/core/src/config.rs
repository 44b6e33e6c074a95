//! Whole-pipeline configuration: a TOML document with one table per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentPolicy;
use crate::error::{Error, Result};
use crate::groundtruth::GroundTruthConfig;
use crate::loss::LossConfig;
use crate::nn::ModelConfig;
use crate::phantom::{EffectSpec, PhantomSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_root: PathBuf::from("out"), output_root: PathBuf::from("out") }
    }
}

/// Training-loop settings other than augmentation and loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// Share of all cases held out as the test set; 0 trains on everything.
    pub test_fraction: f64,
    pub prior_bias: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            validation_fraction: t.validation_fraction,
            test_fraction: 1.0 / 7.0,
            prior_bias: t.prior_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Propagated to every seeded stage.
    pub seed: u64,
    pub paths: Paths,
    pub train: TrainSection,
    pub augment: AugmentPolicy,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Template for generated cases.
    pub phantom: PhantomSpec,
    pub cohort: EffectSpec,
    pub groundtruth: GroundTruthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            train: TrainSection::default(),
            augment: AugmentPolicy::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            phantom: PhantomSpec::cohort_default(),
            cohort: EffectSpec::default(),
            groundtruth: GroundTruthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("config: {e}")))
    }

    /// Applies `key.path=value` overrides; values are parsed as TOML and fall
    /// back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?)
            .map_err(|e| Error::format(format!("config: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::domain(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::domain(format!("override {key}: {p} is not a table")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::format(format!("config: {e}")))?;
        Self::from_toml(&text)
    }

    /// Training settings with the global seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: self.seed,
            validation_fraction: self.train.validation_fraction,
            augment: AugmentPolicy { seed: self.seed, ..self.augment.clone() },
            loss: self.loss,
            prior_bias: self.train.prior_bias,
        }
    }

    /// Model settings with the global seed as the initialisation seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { init_seed: self.seed, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model.validate()?;
        self.phantom.validate()?;
        if !(0.0..1.0).contains(&self.train.test_fraction) {
            return Err(Error::domain("train.test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}
