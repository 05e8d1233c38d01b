//! TOML run configuration with one section per module.

use std::collections::BTreeMap;
use std::path::Path;

use af1_core::analysis::LensNorm;
use af1_core::discovery::DEFAULT_THRESHOLD;
use af1_core::interventions::DEFAULT_CAMA_SAMPLES;
use af1_core::trainer::TrainConfig;
use af1_core::util::derive_seed;
use af1_core::ModelConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "AF1_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Full model shape; the default 6-layer recipe when absent.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: DataSection,
    pub cama: CamaSection,
    pub grid: GridSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Prompts per evaluation dataset.
    pub n: usize,
    pub operand_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamaSection {
    pub samples: usize,
    pub exhaustive: bool,
    pub rtma_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub lens_k: usize,
    pub lens_norm: LensNorm,
    pub attention_prompts: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n: 200, operand_max: 100 }
    }
}

impl Default for CamaSection {
    fn default() -> Self {
        Self {
            samples: DEFAULT_CAMA_SAMPLES,
            exhaustive: false,
            rtma_samples: DEFAULT_CAMA_SAMPLES,
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        Self { theta: DEFAULT_THRESHOLD }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            lens_k: 1,
            lens_norm: LensNorm::FinalNorm,
            attention_prompts: 100,
        }
    }
}

impl Config {
    /// Read `path` (or defaults), then apply the seed environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Config::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .parse()
                .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        self.model.unwrap_or_else(|| ModelConfig::seed_default(vocab_size))
    }

    /// The top-level seed split per purpose.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        ["train", "data", "cama", "rtma", "eval"]
            .into_iter()
            .map(|p| (p.to_string(), derive_seed(self.seed, p, &[])))
            .collect()
    }

    pub fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose, &[])
    }
}
