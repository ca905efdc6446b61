//! Experiment configuration: one file drives corpus, crafting, victim
//! training, and attacks for both arms of a comparison run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::ExtractionConfig;
use crate::corpus::{Canary, MarkovConfig};
use crate::craft::CraftPlan;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// bundled synthetic generator; ignored when `file` is set
    pub markov: MarkovConfig,
    /// optional plain-text corpus, one sample per line
    pub file: Option<PathBuf>,
    pub vocab_cap: usize,
    pub split_seed: u64,
    pub r_aux: f64,
    pub val_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            markov: MarkovConfig::default(),
            file: None,
            vocab_cap: 512,
            split_seed: 0,
            r_aux: 1.0,
            val_fraction: 0.2,
        }
    }
}

/// Warm-up of the released "public" backbone both arms start from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// generator seed for the disjoint public corpus
    pub corpus_seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec { epochs: 2, lr: 5e-3, batch_size: 8, corpus_seed: 77 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub alphas: Vec<f64>,
    pub extraction: ExtractionConfig,
    /// gram lengths for extraction overlap metrics
    pub l_list: Vec<usize>,
    pub canary: Option<Canary>,
    pub canary_sample_budget: Option<usize>,
    pub stealth_k: usize,
    pub stealth_suffix_len: usize,
    /// members/nonmembers evaluated per arm (0 = use everything)
    pub eval_per_class: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            alphas: crate::attack::DEFAULT_ALPHAS.to_vec(),
            extraction: ExtractionConfig::default(),
            l_list: vec![2, 5],
            canary: None,
            canary_sample_budget: None,
            stealth_k: 2,
            stealth_suffix_len: crate::attack::stealth::DEFAULT_SUFFIX_LEN,
            eval_per_class: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub auc: f64,
    pub tpr: f64,
}

impl Default for Margins {
    fn default() -> Self {
        // toy-scale noise floor measured across seeds
        Margins { auc: 0.02, tpr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    pub craft: CraftPlan,
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub margins: Margins,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Serde(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.craft.validate()?;
        self.train.validate()?;
        if self.corpus.vocab_cap < 2 {
            return Err(Error::InvalidInput("vocab_cap must be >= 2".into()));
        }
        if self.attack.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidInput("alphas must lie in (0, 1)".into()));
        }
        if let Some(c) = &self.attack.canary {
            c.validate()?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; stored in every output for
    /// diffability and arm-compatibility checks.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canonical);
        format!("{:x}", h.finalize())
    }
}
