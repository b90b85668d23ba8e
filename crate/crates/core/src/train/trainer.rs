//! Training loop and run-directory layout.
//!
//! ```text
//! <run>/metrics.jsonl                 one JSON object per logged step
//! <run>/checkpoints/step_00000100.bin model parameters
//! <run>/checkpoints/optimizer.bin     Adam state for the newest checkpoint
//! ```
//!
//! The batch and the dropout stream of step `s` depend only on the seed and
//! `s`, so a resumed run replays an uninterrupted one exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Checkpoint, ModelConfig, Seq2SeqModel, PAD};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::tensor::Tape;

use super::adam::{lr_schedule, Adam, AdamConfig};
use super::tasks::{Split, SyntheticTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Target tokens per batch (EOS included).
    #[serde(default = "defaults::batch_tokens")]
    pub batch_tokens: usize,
    #[serde(default = "defaults::warmup")]
    pub warmup: u64,
    /// Multiplier on the warmup schedule.
    #[serde(default = "defaults::one")]
    pub lr_scale: f64,
    #[serde(default = "defaults::label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "defaults::log_every")]
    pub log_every: u64,
    /// Newest checkpoints kept on disk; 0 keeps all.
    #[serde(default = "defaults::keep_checkpoints")]
    pub keep_checkpoints: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn batch_tokens() -> usize {
        1024
    }
    pub fn warmup() -> u64 {
        400
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn label_smoothing() -> f64 {
        0.1
    }
    pub fn checkpoint_every() -> u64 {
        100
    }
    pub fn log_every() -> u64 {
        10
    }
    pub fn keep_checkpoints() -> usize {
        10
    }
}

impl TrainConfig {
    pub fn new(steps: u64) -> Self {
        TrainConfig {
            steps,
            batch_tokens: defaults::batch_tokens(),
            warmup: defaults::warmup(),
            lr_scale: 1.0,
            label_smoothing: defaults::label_smoothing(),
            checkpoint_every: defaults::checkpoint_every(),
            log_every: defaults::log_every(),
            keep_checkpoints: defaults::keep_checkpoints(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::config("train.batch_tokens", "must be positive"));
        }
        if self.warmup == 0 {
            return Err(Error::config("train.warmup", "must be positive"));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::config("train.lr_scale", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing", "must lie in [0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("train.adam", "need 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64, d_model: usize) -> f64 {
        self.lr_scale * lr_schedule(step, d_model, self.warmup)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean label-smoothed loss over the logging interval.
    pub loss: f64,
    /// Argmax accuracy over target tokens in the interval.
    pub token_accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    checkpoint_dir(run_dir).join(format!("step_{step:08}.bin"))
}

pub fn optimizer_path(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("optimizer.bin")
}

/// Model checkpoints in the run, oldest first.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = checkpoint_dir(run_dir);
    if !dir.is_dir() {
        return Ok(vec![]);
    }
    let mut out = vec![];
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<StepMetrics>> {
    let path = metrics_path(run_dir);
    if !path.exists() {
        return Ok(vec![]);
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Training batch for `step`: train-split pairs until `batch_tokens`
/// target tokens are reached.
pub fn training_batch(task: &SyntheticTask, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let mut pairs = vec![];
    let mut tokens = 0;
    while tokens < cfg.batch_tokens {
        let s = task.sample(Split::Train, &mut rng);
        let t = task.target(&s);
        tokens += t.len() + 1;
        pairs.push((s, t));
    }
    Batch::from_pairs(&pairs)
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d50_u64.rotate_left(48));
    rng.set_stream(step);
    rng
}

/// Model, parameters and optimizer at some step.
pub struct TrainState {
    pub model: Seq2SeqModel,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub tokens: usize,
    pub lr: f64,
    pub max_update: f64,
}

impl TrainState {
    pub fn new(config: &ModelConfig, adam: AdamConfig) -> Result<Self> {
        let (model, params) = Seq2SeqModel::build::<f32>(config)?;
        let adam = Adam::new(adam, &params);
        Ok(TrainState {
            model,
            params,
            adam,
            step: 0,
        })
    }

    /// Restores the newest checkpoint of `run_dir` with its optimizer state.
    pub fn resume(run_dir: &Path, config: &ModelConfig, adam: AdamConfig) -> Result<Self> {
        let mut state = Self::new(config, adam)?;
        let Some((step, path)) = list_checkpoints(run_dir)?.pop() else {
            return Err(Error::Checkpoint(format!("no checkpoints in {}", run_dir.display())));
        };
        let ck = Checkpoint::load(&path)?;
        if ck.config_digest != config.digest() {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
        ck.apply_to(&mut state.params)?;
        let opt = Checkpoint::load(&optimizer_path(run_dir))?;
        if opt.step != step {
            return Err(Error::Checkpoint(format!(
                "optimizer state is for step {} but the newest checkpoint is step {step}",
                opt.step
            )));
        }
        state.adam = Adam::from_checkpoint(adam, &state.params, &opt)?;
        state.step = step;
        Ok(state)
    }

    pub fn train_step(&mut self, task: &SyntheticTask, cfg: &TrainConfig) -> Result<StepOutcome> {
        let step = self.step + 1;
        let batch = training_batch(task, cfg, step)?;
        let tape = Tape::new();
        let fw = Forward::train(&tape, &self.params, dropout_rng(cfg.seed, step));
        let (logits, loss) = self.model.loss(&fw, &batch, cfg.label_smoothing)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss_value} at step {step}")));
        }
        let (correct, tokens) = {
            let l = tape.value(logits);
            count_correct(l.data(), l.last_dim(), &batch.tgt_out)
        };
        tape.backward(loss)?;
        let grads = tape.param_grads();
        drop(fw);
        let lr = cfg.lr(step, self.model.config.d_model);
        let max_update = self.adam.step(&mut self.params, &grads, lr)?;
        self.step = step;
        Ok(StepOutcome {
            loss: loss_value,
            correct,
            tokens,
            lr,
            max_update,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params, self.step, self.model.config.digest())
    }

    fn save(&self, run_dir: &Path, keep: usize) -> Result<()> {
        fs::create_dir_all(checkpoint_dir(run_dir))?;
        self.checkpoint().save(&checkpoint_path(run_dir, self.step))?;
        self.adam
            .to_checkpoint(&self.params, self.model.config.digest())
            .save(&optimizer_path(run_dir))?;
        if keep > 0 {
            let all = list_checkpoints(run_dir)?;
            for (_, path) in all.iter().take(all.len().saturating_sub(keep)) {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }
}

/// Argmax hits over non-pad targets of `[rows, vocab]` logits.
pub fn count_correct<T: crate::tensor::Float>(logits: &[T], vocab: usize, targets: &[usize]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (r, &gold) in targets.iter().enumerate() {
        if gold == PAD {
            continue;
        }
        total += 1;
        let row = &logits[r * vocab..(r + 1) * vocab];
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        correct += usize::from(arg == gold);
    }
    (correct, total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub last_metrics: Option<StepMetrics>,
}

/// Trains `state` up to `cfg.steps` total steps, logging to and
/// checkpointing into `run_dir`. A fresh state writes a step-0 checkpoint
/// first. On divergence the newest checkpoint on disk is left untouched
/// and a numerical error is returned.
pub fn train(state: &mut TrainState, task: &SyntheticTask, cfg: &TrainConfig, run_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    task.validate()?;
    if task.vocab_size > state.model.config.vocab_size {
        return Err(Error::config("task.vocab_size", "exceeds the model vocabulary"));
    }
    fs::create_dir_all(run_dir)?;
    if state.step == 0 {
        state.save(run_dir, cfg.keep_checkpoints)?;
    }
    // drop log lines past the resume point
    let kept: Vec<StepMetrics> = read_metrics(run_dir)?.into_iter().filter(|m| m.step <= state.step).collect();
    let mut log = fs::File::create(metrics_path(run_dir))?;
    for m in &kept {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
    }
    let start = Instant::now();
    let mut last = kept.last().cloned();
    let (mut loss_sum, mut steps_in, mut correct, mut tokens) = (0.0, 0u64, 0usize, 0usize);
    while state.step < cfg.steps {
        let out = match state.train_step(task, cfg) {
            Ok(out) => out,
            Err(e @ (Error::Numerical(_) | Error::NonFinite { .. })) => {
                let good = list_checkpoints(run_dir)?
                    .last()
                    .map_or_else(|| "none".to_string(), |(s, _)| format!("step {s}"));
                return Err(Error::Numerical(format!(
                    "{e}; training aborted, last good checkpoint: {good}"
                )));
            }
            Err(e) => return Err(e),
        };
        loss_sum += out.loss;
        steps_in += 1;
        correct += out.correct;
        tokens += out.tokens;
        let step = state.step;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let m = StepMetrics {
                step,
                loss: loss_sum / steps_in as f64,
                token_accuracy: correct as f64 / tokens.max(1) as f64,
                lr: out.lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(log, "{}", serde_json::to_string(&m)?)?;
            log.flush()?;
            last = Some(m);
            (loss_sum, steps_in, correct, tokens) = (0.0, 0, 0, 0);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            state.save(run_dir, cfg.keep_checkpoints)?;
        }
    }
    Ok(TrainSummary {
        final_step: state.step,
        last_metrics: last,
    })
}
