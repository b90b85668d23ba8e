//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use rtal::model::ModelConfig;
use rtal::train::{BeamConfig, SyntheticTask, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File name of the configuration copy inside a run directory.
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Steps between validation passes; 0 validates once at the end.
    /// Must be a multiple of `train.checkpoint_every`.
    #[serde(default)]
    pub every: u64,
    /// Held-out sentences per validation or ablation evaluation.
    #[serde(default = "default_sentences")]
    pub sentences: usize,
    #[serde(default)]
    pub beam: BeamConfig,
    /// Checkpoints averaged for decoding.
    #[serde(default = "default_average_last")]
    pub average_last: usize,
}

fn default_sentences() -> usize {
    200
}

fn default_average_last() -> usize {
    5
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: 0,
            sentences: default_sentences(),
            beam: BeamConfig::default(),
            average_last: default_average_last(),
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Copied into `model.seed` and `train.seed`; the only source of randomness.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// The 4-layer, d = 64 model on Copy with vocabulary 16 and lengths 3 to 12.
    pub fn toy_copy(output_dir: impl Into<PathBuf>) -> Self {
        let mut train = TrainConfig::new(3000);
        train.batch_tokens = 512;
        let mut cfg = ExperimentConfig {
            model: ModelConfig::toy(16),
            task: SyntheticTask::copy(16, 3, 12),
            train,
            eval: EvalConfig::default(),
            output_dir: output_dir.into(),
            seed: 1,
        };
        cfg.eval.beam.max_len = cfg.model.max_len;
        cfg.resolve_seed();
        cfg
    }

    /// Reads a configuration file, or `config.json` inside a run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(CONFIG_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| CliError::Parse { path: path.clone(), source })?;
        cfg.resolve_seed();
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(CliError::io(path))
    }

    pub fn resolve_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let bad = |field: &str, msg: &str| {
            Err(CliError::Core(rtal::Error::Config {
                field: field.into(),
                msg: msg.into(),
            }))
        };
        if self.task.vocab_size > self.model.vocab_size {
            return bad("task.vocab_size", "exceeds model.vocab_size");
        }
        if self.task.max_len + 1 > self.model.max_len {
            return bad("task.max_len", "sources plus EOS must fit in model.max_len");
        }
        if self.eval.every % self.train.checkpoint_every != 0 {
            return bad("eval.every", "must be a multiple of train.checkpoint_every");
        }
        if self.eval.sentences == 0 {
            return bad("eval.sentences", "must be positive");
        }
        if self.eval.average_last == 0 {
            return bad("eval.average_last", "must be positive");
        }
        if self.eval.beam.beam_size == 0 || self.eval.beam.max_len == 0 {
            return bad("eval.beam", "beam_size and max_len must be positive");
        }
        if self.eval.beam.max_len > self.model.max_len {
            return bad("eval.beam.max_len", "cannot exceed model.max_len");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::toy_copy(dir.path().join("run"));
        cfg.seed = 9;
        let path = dir.path().join("c.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back.model.seed, 9);
        assert_eq!(back.train.seed, 9);
        cfg.resolve_seed();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_fields_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy_copy("x");
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["train"]["stepz"] = 5.into();
        let path = dir.path().join("c.json");
        fs::write(&path, v.to_string()).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("stepz"), "{err}");
    }

    #[test]
    fn invalid_fields_named() {
        let mut cfg = ExperimentConfig::toy_copy("x");
        cfg.task.vocab_size = 40;
        assert!(cfg.validate().unwrap_err().to_string().contains("task.vocab_size"));
        let mut cfg = ExperimentConfig::toy_copy("x");
        cfg.eval.every = 7;
        assert!(cfg.validate().unwrap_err().to_string().contains("eval.every"));
    }
}
