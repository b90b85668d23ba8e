//! Checkpoint averaging and decoding of token files.

use std::fs;
use std::path::{Path, PathBuf};

use rtal::model::{Checkpoint, Seq2SeqModel, NUM_SPECIAL};
use rtal::params::ParamStore;
use rtal::train::{average_checkpoints, beam_search, bleu, greedy_decode, list_checkpoints, BeamConfig, BleuReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Default output of `average` inside a run directory.
pub const AVERAGED_FILE: &str = "averaged.bin";

/// Averages the newest `k` checkpoints of a run.
pub fn average_last(run_dir: &Path, k: usize) -> Result<Checkpoint> {
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let all = list_checkpoints(run_dir)?;
    if all.len() < k {
        return Err(CliError::Usage(format!(
            "{} has {} checkpoints, fewer than the {k} requested",
            run_dir.display(),
            all.len()
        )));
    }
    let cks = all[all.len() - k..]
        .iter()
        .map(|(_, p)| Checkpoint::load(p))
        .collect::<rtal::Result<Vec<_>>>()?;
    Ok(average_checkpoints(&cks)?)
}

/// Which parameters to decode with.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    /// `averaged.bin` when it is current, otherwise an on-the-fly average of
    /// the newest `eval.average_last` checkpoints (fewer if fewer exist).
    Averaged,
    Last,
    File(PathBuf),
}

/// Loads the run's model with the selected weights. Returns a short
/// description of where the weights came from.
pub fn load_model(run_dir: &Path, weights: &Weights) -> Result<(ExperimentConfig, Seq2SeqModel, ParamStore<f32>, String)> {
    let cfg = ExperimentConfig::load(run_dir)?;
    let (model, mut params) = Seq2SeqModel::build::<f32>(&cfg.model)?;
    let all = list_checkpoints(run_dir)?;
    let newest = all
        .last()
        .map(|c| c.0)
        .ok_or_else(|| CliError::Usage(format!("{} has no checkpoints", run_dir.display())))?;
    let (ck, source) = match weights {
        Weights::File(p) => (Checkpoint::load(p)?, p.display().to_string()),
        Weights::Last => (Checkpoint::load(&all[all.len() - 1].1)?, format!("checkpoint {newest}")),
        Weights::Averaged => {
            let saved = run_dir.join(AVERAGED_FILE);
            match Checkpoint::load(&saved) {
                Ok(ck) if ck.step == newest => (ck, saved.display().to_string()),
                _ => {
                    let k = cfg.eval.average_last.min(all.len());
                    (average_last(run_dir, k)?, format!("average of the last {k} checkpoints"))
                }
            }
        }
    };
    if ck.config_digest != cfg.model.digest() {
        return Err(CliError::Usage(format!("{source} does not belong to this run's model configuration")));
    }
    ck.apply_to(&mut params)?;
    Ok((cfg, model, params, source))
}

/// Reads one whitespace-separated id sequence per line.
pub fn read_sequences(path: &Path, vocab: usize) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|w| match w.parse::<usize>() {
                    Ok(t) if (NUM_SPECIAL..vocab).contains(&t) => Ok(t),
                    _ => Err(CliError::Usage(format!(
                        "{} line {}: `{w}` is not a token id in {NUM_SPECIAL}..{vocab}",
                        path.display(),
                        i + 1
                    ))),
                })
                .collect()
        })
        .collect()
}

pub fn format_sequences(seqs: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Decodes every source; `None` selects greedy decoding.
pub fn decode_sources(
    model: &Seq2SeqModel,
    params: &ParamStore<f32>,
    sources: &[Vec<usize>],
    beam: Option<&BeamConfig>,
    max_len: usize,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut outputs = Vec::with_capacity(sources.len());
    let mut unfinished = 0;
    for src in sources {
        let h = match beam {
            Some(cfg) => beam_search(model, params, src, cfg)?,
            None => greedy_decode(model, params, src, max_len)?,
        };
        unfinished += usize::from(!h.finished);
        outputs.push(h.output().to_vec());
    }
    Ok((outputs, unfinished))
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodeReport {
    pub weights: String,
    pub sentences: usize,
    pub exact_match: f64,
    pub unfinished: usize,
    pub bleu: BleuReport,
}

pub fn score(outputs: &[Vec<usize>], references: &[Vec<usize>], unfinished: usize, weights: String) -> Result<DecodeReport> {
    if outputs.len() != references.len() {
        return Err(CliError::Usage(format!(
            "{} outputs but {} references",
            outputs.len(),
            references.len()
        )));
    }
    let exact = outputs.iter().zip(references).filter(|(o, r)| o == r).count();
    Ok(DecodeReport {
        weights,
        sentences: outputs.len(),
        exact_match: exact as f64 / outputs.len().max(1) as f64,
        unfinished,
        bleu: bleu(outputs, references, 4)?,
    })
}
