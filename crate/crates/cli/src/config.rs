use std::path::Path;

use anyhow::{Context, Result};
use ecc_core::control::ControlConfig;
use ecc_core::eccnet::EccNetConfig;
use ecc_core::synthdata::DEFAULT_GAZES_PER_SET;
use ecc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_sets: usize,
    pub gazes_per_set: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_sets: 200,
            gazes_per_set: DEFAULT_GAZES_PER_SET,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Edge of the square shift window; 3 allows one pixel each way.
    pub slack_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { slack_window: 3 }
    }
}

/// Everything a command can be configured with. Missing sections and keys
/// take their defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub control: ControlConfig,
    pub model: EccNetConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).context("invalid run configuration")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// `--seed` seeds both data generation and training.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.data.seed = s;
            self.train.rng_seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.control.validate()?;
        ecc_core::metrics::slack_radius(self.eval.slack_window)?;
        ecc_core::eccnet::EccNet::new(self.model.clone())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"control": {"filter": {"gamma": 1}}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"data": {"n_sets": 3}, "model": {"encoder_channels": [4, 8, 8]}}"#).unwrap();
        assert_eq!(c.data.n_sets, 3);
        assert_eq!(c.data.gazes_per_set, 40);
        assert_eq!(c.model.encoder_channels, vec![4, 8, 8]);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn seed_override() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.data.seed, c.train.rng_seed), (9, 9));
    }
}
