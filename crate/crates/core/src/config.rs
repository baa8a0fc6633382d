//! Run configuration: a single JSON document with defaults for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_file, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::IdBaselineConfig;
use crate::gradcheck::GradcheckConfig;
use crate::model::{ModelConfig, Variant};
use crate::prompt::PromptConfig;
use crate::training::TrainStageConfig;

/// Exactly one of `synthetic`, `dir` (a saved corpus) or `events` (raw JSONL files).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSource {
    pub synthetic: Option<SynthConfig>,
    pub dir: Option<PathBuf>,
    pub events: Option<Vec<PathBuf>>,
    /// Target domain name; the last domain by name when absent.
    pub target: Option<String>,
    pub min_seq_len: usize,
    pub min_item_freq: usize,
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource {
            synthetic: Some(SynthConfig::default()),
            dir: None,
            events: None,
            target: None,
            min_seq_len: 5,
            min_item_freq: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalScope {
    All,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Pair cap per distance cell.
    pub sample_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { sample_size: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSource,
    pub vocab_min_count: usize,
    /// Title truncation length in tokens.
    pub max_title_tokens: usize,
    pub max_items: usize,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub variant: Variant,
    pub pretrain: TrainStageConfig,
    pub tune: TrainStageConfig,
    pub k_list: Vec<usize>,
    pub eval_domains: EvalScope,
    pub id_baseline: IdBaselineConfig,
    pub analysis: AnalysisConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSource::default(),
            vocab_min_count: 1,
            max_title_tokens: 16,
            max_items: 50,
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            variant: Variant::Full,
            pretrain: TrainStageConfig {
                batch_size: 12,
                ..TrainStageConfig::default()
            },
            tune: TrainStageConfig {
                batch_size: 16,
                ..TrainStageConfig::default()
            },
            k_list: vec![10, 20],
            eval_domains: EvalScope::All,
            id_baseline: IdBaselineConfig::default(),
            analysis: AnalysisConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys (all of them are reported at once).
    pub fn from_json(bytes: &[u8]) -> Result<RunConfig> {
        let mut unknown = Vec::new();
        let mut de = serde_json::Deserializer::from_slice(bytes);
        let cfg: RunConfig = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string())).map_err(|e| Error::Config {
            message: format!("invalid configuration: {e}"),
            keys: Vec::new(),
        })?;
        de.end().map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::Config {
                message: format!("unknown configuration keys: {}", unknown.join(", ")),
                keys: unknown,
            });
        }
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative corpus paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = Self::from_json(&read_file(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.corpus.dir.as_mut() {
            fix(d);
        }
        if let Some(ev) = self.corpus.events.as_mut() {
            ev.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let c = &self.corpus;
        let sources = usize::from(c.synthetic.is_some()) + usize::from(c.dir.is_some()) + usize::from(c.events.is_some());
        if sources != 1 {
            bad.push("corpus".into());
        }
        if let Some(d) = &c.dir {
            if !d.is_dir() {
                bad.push("corpus.dir".into());
            }
        }
        if let Some(ev) = &c.events {
            if ev.is_empty() || ev.iter().any(|p| !p.is_file()) {
                bad.push("corpus.events".into());
            }
        }
        if let Some(s) = &c.synthetic {
            if let Err(Error::Config { keys, .. }) = s.validate() {
                bad.extend(keys.into_iter().map(|k| format!("corpus.synthetic.{k}")));
            }
        }
        if self.max_title_tokens == 0 {
            bad.push("max_title_tokens".into());
        }
        if self.max_items == 0 {
            bad.push("max_items".into());
        }
        if self.encoder.max_tokens < self.max_title_tokens + 1 {
            bad.push("encoder.max_tokens".into());
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            bad.push("k_list".into());
        }
        if self.analysis.sample_size == 0 {
            bad.push("analysis.sample_size".into());
        }
        for (section, stage) in [("pretrain", &self.pretrain), ("tune", &self.tune)] {
            if let Err(Error::Config { keys, .. }) = stage.validate(section) {
                bad.extend(keys);
            }
        }
        for r in [self.encoder.validate(), self.prompt.validate(self.encoder.d_model)] {
            if let Err(Error::Config { keys, .. }) = r {
                bad.extend(keys);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                message: format!("invalid configuration values: {}", bad.join(", ")),
                keys: bad,
            })
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            encoder: self.encoder.clone(),
            prompt: self.prompt.clone(),
            layout: self.variant.layout(),
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON, excluding `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
