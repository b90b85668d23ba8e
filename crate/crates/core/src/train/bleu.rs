use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

/// Corpus-level BLEU with its components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub score: f64,
    /// Clipped n-gram precision for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU = {:.2}", 100.0 * self.score)?;
        writeln!(f, "{:<4} {:>10} {:>10} {:>10}", "n", "matches", "total", "precision")?;
        for (n, ((m, t), p)) in self.matches.iter().zip(&self.totals).zip(&self.precisions).enumerate() {
            writeln!(f, "{:<4} {:>10} {:>10} {:>10.4}", n + 1, m, t, p)?;
        }
        write!(
            f,
            "brevity penalty {:.4} (candidate {} / reference {})",
            self.brevity_penalty, self.candidate_len, self.reference_len
        )
    }
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over one reference per candidate, no smoothing.
pub fn bleu<S: Eq + Hash>(candidates: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Invalid("max_n must be positive".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let candidate_len: usize = candidates.iter().map(Vec::len).sum();
    let reference_len: usize = references.iter().map(Vec::len).sum();
    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}
