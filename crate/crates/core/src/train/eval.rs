use serde::Serialize;

use crate::error::Result;
use crate::model::Seq2SeqModel;
use crate::params::ParamStore;
use crate::tensor::Float;

use super::beam::{beam_search, BeamConfig, Hypothesis};
use super::bleu::{bleu, BleuReport};

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    /// Fraction of outputs equal to their reference.
    pub exact_match: f64,
    /// Outputs that never produced EOS.
    pub unfinished: usize,
    pub bleu: BleuReport,
}

/// Beam-decodes every source.
pub fn decode_all<T: Float>(
    model: &Seq2SeqModel,
    params: &ParamStore<T>,
    sources: &[Vec<usize>],
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    sources.iter().map(|s| beam_search(model, params, s, beam)).collect()
}

/// Decodes `pairs` and scores outputs against targets.
pub fn evaluate<T: Float>(
    model: &Seq2SeqModel,
    params: &ParamStore<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    beam: &BeamConfig,
) -> Result<EvalReport> {
    let sources: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let hyps = decode_all(model, params, &sources, beam)?;
    let outputs: Vec<Vec<usize>> = hyps.iter().map(|h| h.output().to_vec()).collect();
    let references: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    let exact = outputs.iter().zip(&references).filter(|(o, r)| o == r).count();
    Ok(EvalReport {
        sentences: pairs.len(),
        exact_match: exact as f64 / pairs.len().max(1) as f64,
        unfinished: hyps.iter().filter(|h| !h.finished).count(),
        bleu: bleu(&outputs, &references, 4)?,
    })
}
