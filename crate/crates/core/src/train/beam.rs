//! Beam search with the length penalty `((5 + len) / 6)^alpha`.
//!
//! At every step the `beam_size` best expansions of the live hypotheses are
//! kept, EOS expansions included; those ending in EOS move to the finished
//! set. With `beam_size = 1` this is greedy decoding. Search stops early once
//! no live hypothesis can beat the best finished one. Lengths count generated
//! tokens including EOS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Seq2SeqModel, BOS, EOS, PAD};
use crate::params::ParamStore;
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            alpha: 0.6,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Orders finished hypotheses best first: higher score, then earlier
/// finish, then smaller token sequence.
pub fn compare_finished(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over an arbitrary next-token scorer. `step` receives
/// equal-length prefixes (BOS first) and returns log-probabilities over the
/// vocabulary for each.
pub fn beam_search_with(
    mut step: impl FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::config("beam_size", "must be at least 1"));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::config("alpha", "must be non-negative"));
    }
    if cfg.max_len == 0 {
        return Err(Error::config("max_len", "must be at least 1"));
    }
    let mut alive = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let best_bound = lengths_bound(cfg);
    for _ in 0..cfg.max_len {
        let prefixes: Vec<Vec<usize>> = alive
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let scores = step(&prefixes)?;
        if scores.len() != alive.len() {
            return Err(Error::Invalid("scorer returned the wrong number of rows".into()));
        }
        let mut candidates: Vec<Hypothesis> = Vec::with_capacity(alive.len() * scores[0].len());
        for (h, row) in alive.iter().zip(&scores) {
            for (tok, &lp) in row.iter().enumerate() {
                if tok == PAD || tok == BOS {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    finished: tok == EOS,
                });
            }
        }
        // equal lengths, so raw log-probability orders scores too
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        candidates.truncate(cfg.beam_size);
        alive.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
        if let Some(best) = finished.iter().map(|h| h.score(cfg.alpha)).max_by(f64::total_cmp) {
            let reachable = alive.iter().map(|h| best_bound(h.log_prob)).fold(f64::NEG_INFINITY, f64::max);
            if best >= reachable {
                break;
            }
        }
    }
    if finished.is_empty() {
        alive.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        return alive
            .into_iter()
            .next()
            .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()));
    }
    finished.sort_by(|a, b| compare_finished(a, b, cfg.alpha));
    Ok(finished.swap_remove(0))
}

/// Best score a live hypothesis with log-probability `lp` could still reach:
/// log-probabilities only decrease and the penalty grows with length, so
/// the optimum is keeping `lp` and finishing at `max_len`.
fn lengths_bound(cfg: &BeamConfig) -> impl Fn(f64) -> f64 {
    let lp_max = length_penalty(cfg.max_len, cfg.alpha);
    move |lp| if lp <= 0.0 { lp / lp_max } else { lp }
}

/// Beam search for one source sentence.
pub fn beam_search<T: Float>(
    model: &Seq2SeqModel,
    params: &ParamStore<T>,
    source: &[usize],
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    let memory = model.encode_sources(params, &[source.to_vec()])?;
    beam_search_with(|prefixes| model.forward_step(params, &memory, prefixes), cfg)
}

/// Argmax decoding, independent of the beam machinery.
pub fn greedy_decode<T: Float>(
    model: &Seq2SeqModel,
    params: &ParamStore<T>,
    source: &[usize],
    max_len: usize,
) -> Result<Hypothesis> {
    let memory = model.encode_sources(params, &[source.to_vec()])?;
    let mut h = Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let prefix: Vec<usize> = std::iter::once(BOS).chain(h.tokens.iter().copied()).collect();
        let row = model.forward_step(params, &memory, &[prefix])?.remove(0);
        let (tok, lp) = row
            .iter()
            .enumerate()
            .filter(|(t, _)| *t != PAD && *t != BOS)
            .fold((EOS, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        h.tokens.push(tok);
        h.log_prob += lp;
        if tok == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}
