//! JSON run configuration. Every key is optional; missing keys take the
//! defaults below.
//!
//! ```json
//! {
//!   "preset": "toy",
//!   "seed": 0,
//!   "corpus": { "pretrain_utts": 2000, "adapt_utts": 500, "test_utts": 200 },
//!   "pretrain": { "steps": 6000, "adam": { "lr": 0.003 } },
//!   "adapt": { "steps": 1000 },
//!   "study": { "seeds": [0, 1, 2], "target_languages": 2 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, Schedule};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::SchemeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub pretrain_utts: usize,
    pub adapt_utts: usize,
    pub test_utts: usize,
    /// Graphemes per utterance, inclusive.
    pub len_range: (usize, usize),
    pub sigma: f64,
    pub subset_size: usize,
    /// Grapheme-subset overlap between source and Study-1 targets.
    pub target_overlap: f64,
    /// Prototype overlap between source and Study-1 targets.
    pub target_proto_overlap: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            pretrain_utts: 2000,
            adapt_utts: 500,
            test_utts: 200,
            len_range: (3, 6),
            sigma: 0.1,
            subset_size: 20,
            target_overlap: 1.0,
            target_proto_overlap: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub target_languages: usize,
    pub study1_schemes: Vec<SchemeId>,
    pub study2_schemes: Vec<SchemeId>,
    pub study3_schemes: Vec<SchemeId>,
    /// Study-2 related target: prototype overlap with the source languages.
    pub related_proto_overlap: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        use SchemeId::*;
        StudyConfig {
            seeds: vec![0, 1, 2],
            target_languages: 2,
            study1_schemes: vec![B0, F0, F1, F1a, F3, F4, F5, Car1, Car2, Car3],
            study2_schemes: vec![M0, M1, M2],
            study3_schemes: vec![J0, J1, J2, J3, J4],
            related_proto_overlap: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Model preset name; ignored when `model` is given.
    pub preset: String,
    pub model: Option<ModelConfig>,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub study: StudyConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            preset: "toy".into(),
            model: None,
            seed: 0,
            corpus: CorpusConfig::default(),
            pretrain: TrainConfig {
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                schedule: Schedule::InverseSqrt { warmup: 200 },
                batch_size: 4,
                steps: 6000,
                seed: 0,
            },
            adapt: TrainConfig {
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                schedule: Schedule::Constant,
                batch_size: 4,
                steps: 1000,
                seed: 0,
            },
            study: StudyConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: HarnessConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::preset(&self.preset)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        let c = &self.corpus;
        if c.pretrain_utts == 0 || c.adapt_utts == 0 || c.test_utts == 0 {
            return Err(Error::config("corpus sizes must be >= 1"));
        }
        if self.study.seeds.is_empty() || self.study.target_languages == 0 {
            return Err(Error::config("studies need at least one seed and one target language"));
        }
        Ok(())
    }
}
