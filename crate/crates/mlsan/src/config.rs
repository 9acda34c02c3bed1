//! Experiment configuration file: one TOML document with sections for
//! generation, model dimensions, training, splitting, and the experiment
//! protocol. Unknown keys are rejected; the fully resolved config is
//! snapshotted next to every output so results are reproducible from
//! their own artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DialogueCorpus, GeneratorConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_spk: usize,
    pub d_h: usize,
    pub context_window: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_spk: 16,
            d_h: 32,
            context_window: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            fractions: (0.7, 0.15, 0.15),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2, 3, 4],
            lambda_grid: crate::experiment::DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Model dimensions for a given corpus.
    pub fn model_config(&self, corpus: &DialogueCorpus) -> ModelConfig {
        ModelConfig {
            num_speakers: corpus.num_speakers,
            num_emotions: corpus.num_emotions,
            modality_dims: corpus.modality_dims.clone(),
            d_spk: self.model.d_spk,
            d_h: self.model.d_h,
            context_window: self.model.context_window,
        }
    }

    /// Fully resolved TOML snapshot (all defaults materialized).
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.snapshot()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.snapshot();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[train]\nepochs = 3\nbogus_key = 1\n";
        let res: std::result::Result<RunConfig, _> = toml::from_str(text);
        assert!(res.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = "[generator]\nnum_speakers = 8\n\n[train]\nlambda = 0.2\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.generator.num_speakers, 8);
        assert_eq!(cfg.train.lambda, 0.2);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.model.d_spk, 16);
    }
}
