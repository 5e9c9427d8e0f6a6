//! Pipeline configuration: a TOML file plus command-line overrides.
//!
//! Relative paths in the file are resolved against the file's directory.
//!
//! ```toml
//! seed = 42
//!
//! [paths]
//! captions = "captions.jsonl"
//! embeddings = "embeddings.txt"
//! features = "features.txt"
//! model = "out/model.bin"
//! lm = "out/lm.json"
//! vocab = "out/vocab.json"
//!
//! [vocabulary]
//! threshold = 10
//!
//! [train]
//! learning_rate = 0.00025
//! negatives_per_positive = 15
//! epochs = 10
//!
//! [selection]
//! np = 20
//! vp = 5
//! pp = 5
//!
//! [decode]
//! beam_width = 100
//! prob_threshold = 0.01
//! max_sentences = 1000
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phrasecap::bilinear::{DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE, DEFAULT_NEGATIVES};
use phrasecap::corpus::DEFAULT_VOCAB_THRESHOLD;
use phrasecap::{DecodeConfig, SelectionCaps, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub captions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularySection {
    pub threshold: u64,
}

impl Default for VocabularySection {
    fn default() -> Self {
        VocabularySection {
            threshold: DEFAULT_VOCAB_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: DEFAULT_LEARNING_RATE,
            negatives_per_positive: DEFAULT_NEGATIVES,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub vocabulary: VocabularySection,
    pub train: TrainSection,
    pub selection: SelectionCaps,
    pub decode: DecodeConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut config: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve_against(base);
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            negatives_per_positive: self.train.negatives_per_positive,
            epochs: self.train.epochs,
            seed: self.seed,
        }
    }

    pub fn caps(&self) -> SelectionCaps {
        self.selection
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.threshold == 0 {
            bail!("vocabulary.threshold must be at least 1");
        }
        let caps = self.caps();
        if caps.np == 0 || caps.vp == 0 || caps.pp == 0 {
            bail!("selection caps must be at least 1");
        }
        if self.decode.beam_width == 0 {
            bail!("decode.beam_width must be at least 1");
        }
        if !(0.0..1.0).contains(&self.decode.prob_threshold) {
            bail!("decode.prob_threshold must lie in [0, 1)");
        }
        if self.decode.max_sentences == 0 {
            bail!("decode.max_sentences must be at least 1");
        }
        self.train_config()
            .validate()
            .map_err(|e| anyhow::anyhow!(e))?;
        Ok(())
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.captions,
            &mut self.embeddings,
            &mut self.features,
            &mut self.model,
            &mut self.lm,
            &mut self.vocab,
            &mut self.references,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
