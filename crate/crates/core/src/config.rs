//! Run configuration: one JSON document covering every module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GenerateConfig, Split};
use crate::encoder::TuneMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::tte::{Averaging, TteConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub imbalance_ratio: f64,
    /// Imbalance of the generated test split.
    pub test_imbalance_ratio: f64,
    pub snr: f64,
    pub image_size: usize,
    pub jitter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            samples: 600,
            test_samples: 400,
            imbalance_ratio: 50.0,
            test_imbalance_ratio: 1.0,
            snr: 5.0,
            image_size: 32,
            jitter: 1,
        }
    }
}

impl DataConfig {
    pub fn generate_config(&self, split: Split, seed: u64) -> GenerateConfig {
        let (samples, ratio) = match split {
            Split::Train => (self.samples, self.imbalance_ratio),
            Split::Test => (self.test_samples, self.test_imbalance_ratio),
        };
        GenerateConfig {
            classes: self.classes,
            samples,
            imbalance_ratio: ratio,
            snr: self.snr,
            seed,
            image_size: self.image_size,
            split,
            jitter: self.jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TteSettings {
    pub enabled: bool,
    pub e: usize,
    pub average: Averaging,
}

impl Default for TteSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            e: TteConfig::default().e,
            average: Averaging::Probabilities,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratConfig {
    pub head_min: usize,
    pub tail_max: usize,
}

impl Default for StratConfig {
    fn default() -> Self {
        Self {
            head_min: 100,
            tail_max: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tte: TteSettings,
    pub strat: StratConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn tte_config(&self) -> TteConfig {
        TteConfig {
            e: self.tte.e,
            base_size: self.model.vit.image_size,
            patch_size: self.model.vit.patch_size,
            average: self.tte.average,
        }
    }

    /// Collects every validation failure into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.model.validate());
        check(self.train.validate());
        if self.tte.enabled {
            check(self.tte_config().validate());
        }
        if self.strat.tail_max > self.strat.head_min || self.strat.tail_max == 0 {
            problems.push(format!(
                "strat.tail_max = {} must be positive and at most strat.head_min = {}",
                self.strat.tail_max, self.strat.head_min
            ));
        }
        if self.train.mode == TuneMode::Peft && !self.model.vit.adapters {
            problems.push("train.mode = peft requires model.vit.adapters = true".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"epoch": 1}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn all_problems_reported() {
        let mut c = RunConfig::default();
        c.train.batch_size = 0;
        c.tte.enabled = true;
        c.tte.e = 8;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"));
        assert!(msg.contains("must not be a multiple of the ViT patch size"));
    }
}
