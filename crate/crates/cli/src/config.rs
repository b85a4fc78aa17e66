//! The run configuration file and its resolution order:
//! file < `MULTISUM_SEED` < command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use multisum::corpus::synth::SynthConfig;
use multisum::corpus::CorpusLimits;
use multisum::decoding::{DecodeConfig, Preset};
use multisum::pipeline::{FusionOptions, TrainConfig};
use multisum::seq_model::ModelConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MULTISUM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Training corpus (JSONL).
    pub path: Option<PathBuf>,
    /// Entities to summarize; the validation split when unset.
    pub eval: Option<PathBuf>,
    pub val_fraction: f64,
    pub vocab_size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { path: None, eval: None, val_fraction: 0.1, vocab_size: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub preset: Preset,
    pub beam_size: Option<usize>,
    pub length_penalty: Option<f64>,
    pub max_len: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { preset: Preset::Yelp, beam_size: None, length_penalty: None, max_len: None }
    }
}

impl DecodeSection {
    pub fn resolve(&self, preset: Option<Preset>) -> DecodeConfig {
        let base = preset.unwrap_or(self.preset).config();
        DecodeConfig {
            beam_size: self.beam_size.unwrap_or(base.beam_size),
            length_penalty: self.length_penalty.unwrap_or(base.length_penalty),
            max_len: self.max_len.unwrap_or(base.max_len),
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub limits: CorpusLimits,
    pub synth: SynthConfig,
    /// `vocab_size` and `num_categories` are filled in from the vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionOptions,
    pub decode: DecodeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            corpus: CorpusSection::default(),
            limits: CorpusLimits::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionOptions::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The file at `path` if given, else defaults; then the seed override
    /// from the environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    /// Derives the per-stage seeds from the global seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train = std::mem::take(&mut self.train).with_seed(seed);
    }
}
