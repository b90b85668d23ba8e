//! Parameter-count and gradient-check reports.

use std::fmt;

use rtal::diagnostics::{GradCase, TOLERANCE};
use rtal::model::{count_params, AggregationSpec, ModelConfig, ParamCount};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ParamsReport {
    pub structure: &'static str,
    pub formula: &'static str,
    pub position: &'static str,
    pub aggregated_span: String,
    pub counts: ParamCount,
    /// Total of the same model without aggregation.
    pub baseline_total: usize,
    pub aggregation_delta: usize,
}

pub fn params_report(model: &ModelConfig) -> ParamsReport {
    let counts = count_params(model);
    let mut plain = model.clone();
    plain.aggregation = AggregationSpec::none();
    let baseline_total = count_params(&plain).total;
    let agg = model.aggregation;
    ParamsReport {
        structure: agg.structure.as_str(),
        formula: agg.formula.as_str(),
        position: agg.position.as_str(),
        aggregated_span: model.span_label(),
        counts,
        baseline_total,
        aggregation_delta: counts.total - baseline_total,
    }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.counts;
        writeln!(
            f,
            "aggregation: {} / {} / {} ({})",
            self.structure, self.formula, self.position, self.aggregated_span
        )?;
        let rows = [
            ("embedding (tied)", c.embedding),
            ("encoder layers", c.encoder_layers),
            ("decoder layers", c.decoder_layers),
            ("final layer norms", c.final_norms),
            ("encoder aggregation", c.encoder_aggregation),
            ("decoder aggregation", c.decoder_aggregation),
        ];
        for (name, n) in rows {
            writeln!(f, "{name:<22} {n:>14}")?;
        }
        writeln!(f, "{:<22} {:>14} ({})", "total", c.total, millions(c.total))?;
        let pct = 100.0 * self.aggregation_delta as f64 / self.baseline_total as f64;
        write!(
            f,
            "{:<22} {:>14} (+{pct:.2}% over {})",
            "aggregation overhead",
            self.aggregation_delta,
            millions(self.baseline_total)
        )
    }
}

pub fn format_gradcheck(cases: &[GradCase]) -> String {
    let mut s = format!("{:<36} {:>12}  result (tolerance {TOLERANCE:e})\n", "case", "max rel err");
    for c in cases {
        s.push_str(&format!(
            "{:<36} {:>12.3e}  {}\n",
            c.name,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAILED" }
        ));
    }
    s
}
