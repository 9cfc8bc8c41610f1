use std::path::{Path, PathBuf};

use fmsd_core::evaluation::EvalConfig;
use fmsd_core::model::ModelConfig;
use fmsd_core::numerics::checkpoint::sha256_hex;
use fmsd_core::synthcorpus::CorpusConfig;
use fmsd_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Steps taken in smoke mode.
pub const SMOKE_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root of every artifact a run writes.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out: PathBuf::from("runs/default") }
    }
}

/// Every setting of a run in one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical TOML rendering without `paths`, so the same
    /// settings written to two output directories share a hash.
    pub fn hash(&self) -> String {
        let hashed = RunConfig { paths: PathsConfig { out: PathBuf::new() }, ..self.clone() };
        sha256_hex(hashed.to_toml().as_bytes())
    }

    /// `--seed` replaces every seed; `--smoke` shortens training and probes.
    pub fn apply_overrides(&mut self, seed: Option<u64>, smoke: bool) {
        if let Some(s) = seed {
            self.corpus.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
            self.eval.probe.seed = s;
        }
        if smoke {
            self.train.max_steps = SMOKE_STEPS;
            self.train.log_every = 20;
            self.train.checkpoint_every = 100;
            self.eval.probe.steps = 150;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.eval.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.model.vocab_size != self.corpus.vocab_size || self.model.channels != self.corpus.channels {
            return Err(CliError::Usage("model.vocab_size and model.channels must match the corpus".into()));
        }
        Ok(())
    }
}
