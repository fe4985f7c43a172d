use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::evalharness::EvalConfig;
use crate::nn::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::seed;
use crate::taskgen::CorpusConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PretrainShort,
    Opsdl,
    LongSft,
    Eval,
    Compare,
}

fn default_corpus_dir() -> PathBuf {
    "corpus".into()
}
fn default_checkpoint_dir() -> PathBuf {
    "checkpoints".into()
}
fn default_metrics_dir() -> PathBuf {
    "metrics".into()
}

/// Output locations; relative paths resolve against the run's output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "default_corpus_dir")]
    pub corpus: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoints: PathBuf,
    #[serde(default = "default_metrics_dir")]
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: default_corpus_dir(),
            checkpoints: default_checkpoint_dir(),
            metrics: default_metrics_dir(),
        }
    }
}

fn default_short_acc() -> f64 {
    0.9
}
fn default_gap() -> f64 {
    0.2
}

/// Thresholds the pretrained checkpoint must meet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    #[serde(default = "default_short_acc")]
    pub min_short_acc: f64,
    /// Required drop from short-length accuracy to accuracy at the longest length.
    #[serde(default = "default_gap")]
    pub min_gap: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Gate {
            min_short_acc: default_short_acc(),
            min_gap: default_gap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component seed is derived from it by name.
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<Mode>,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: Option<PretrainConfig>,
    pub distill: Option<DistillConfig>,
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub gate: Gate,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    /// Fills component seeds from the root seed. Section-level seeds must be
    /// left unset so a run has exactly one source of randomness.
    pub fn resolve(mut self, root_override: Option<u64>) -> Result<RunConfig> {
        let mut explicit = vec![];
        if self.corpus.seed != 0 {
            explicit.push("corpus");
        }
        if self.eval.seed != 0 {
            explicit.push("eval");
        }
        if self.pretrain.as_ref().is_some_and(|p| p.seed != 0) {
            explicit.push("pretrain");
        }
        if self.distill.as_ref().is_some_and(|d| d.seed != 0) {
            explicit.push("distill");
        }
        if !explicit.is_empty() {
            return Err(Error::Config(format!(
                "seed set in section(s) {}; only the root seed may be set",
                explicit.join(", ")
            )));
        }
        if let Some(s) = root_override {
            self.seed = s;
        }
        let root = self.seed;
        self.corpus.seed = seed::derive(root, "data", &[]);
        self.eval.seed = seed::derive(root, "eval", &[]);
        if let Some(p) = &mut self.pretrain {
            p.seed = seed::derive(root, "pretrain", &[]);
        }
        if let Some(d) = &mut self.distill {
            d.seed = seed::derive(root, "rollout", &[]);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init", &[])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        let vocab = self.corpus.vocab()?;
        if vocab.len() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the corpus vocabulary has {} tokens",
                self.model.vocab_size,
                vocab.len()
            )));
        }
        let max_new = self.distill.as_ref().map_or(self.corpus.value_len + 1, |d| d.max_new);
        let need = self.corpus.long_len + self.corpus.max_query_len() + max_new;
        if need > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "long context plus query and answer needs {need} positions, model has {}",
                self.model.max_seq_len
            )));
        }
        self.eval.validate(&self.corpus, self.model.max_seq_len)?;
        if let Some(p) = &self.pretrain {
            p.validate(&self.corpus)?;
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    pub fn pretrain(&self) -> Result<&PretrainConfig> {
        self.pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("missing [pretrain] section".into()))
    }

    pub fn distill(&self) -> Result<&DistillConfig> {
        self.distill
            .as_ref()
            .ok_or_else(|| Error::Config("missing [distill] section".into()))
    }
}
