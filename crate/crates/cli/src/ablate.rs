//! Ablation grids over aggregation structure, formula and position.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rtal::aggregation::{FormulaKind, Structure};
use rtal::model::{count_params, AggregationSpec, Position};
use rtal::train::{evaluate, generate_task, Split};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::run::run_training;

/// Axes to sweep. An empty axis falls back to the base configuration's value.
#[derive(Clone, Debug, Default)]
pub struct Grid {
    pub structures: Vec<Structure>,
    pub formulas: Vec<FormulaKind>,
    pub positions: Vec<Position>,
    /// Adds a plain Transformer row first.
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub spec: AggregationSpec,
}

fn label(spec: &AggregationSpec) -> String {
    if spec.structure == Structure::None {
        "baseline".into()
    } else {
        format!(
            "{}-{}-{}",
            spec.structure.as_str(),
            spec.formula.as_str(),
            spec.position.as_str()
        )
    }
}

impl Grid {
    /// Cells in row-major order (structure, then formula, then position).
    /// Identical cells are listed once.
    pub fn cells(&self, base: &AggregationSpec) -> Result<Vec<Cell>> {
        if self.structures.is_empty() && self.formulas.is_empty() && self.positions.is_empty() {
            return Err(CliError::Usage(
                "empty ablation grid: give at least one of --structure, --formula, --position".into(),
            ));
        }
        let or_base = |v: &[Structure]| {
            if !v.is_empty() {
                v.to_vec()
            } else if base.structure == Structure::None {
                vec![Structure::Rtal]
            } else {
                vec![base.structure]
            }
        };
        let formulas = if self.formulas.is_empty() { vec![base.formula] } else { self.formulas.clone() };
        let positions = if self.positions.is_empty() { vec![base.position] } else { self.positions.clone() };
        let mut cells = Vec::new();
        if self.baseline {
            cells.push(Cell {
                label: "baseline".into(),
                spec: AggregationSpec::none(),
            });
        }
        for &structure in &or_base(&self.structures) {
            for &formula in &formulas {
                for &position in &positions {
                    let spec = if structure == Structure::None {
                        AggregationSpec::none()
                    } else {
                        AggregationSpec::new(structure, formula, position)
                    };
                    let label = label(&spec);
                    if !cells.iter().any(|c: &Cell| c.label == label) {
                        cells.push(Cell { label, spec });
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// One CSV row. Numeric fields are empty for failed cells.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub structure: &'static str,
    pub formula: &'static str,
    pub position: &'static str,
    pub status: &'static str,
    pub params: usize,
    pub final_loss: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub bleu: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(base: &ExperimentConfig, cell: &Cell, echo: bool) -> Result<(f64, f64, f64, f64)> {
    let mut cfg = base.clone();
    cfg.model.aggregation = cell.spec;
    cfg.output_dir = base.output_dir.join("cells").join(&cell.label);
    let out = run_training(&cfg, false, echo)?;
    let metrics = out
        .last_metrics
        .ok_or_else(|| CliError::Usage("no training steps were run".into()))?;
    let test = generate_task(&cfg.task, Split::Test, cfg.eval.sentences, cfg.seed)?;
    let report = evaluate(&out.state.model, &out.state.params, &test, &cfg.eval.beam)?;
    Ok((metrics.loss, metrics.token_accuracy, report.exact_match, report.bleu.score))
}

/// Trains every cell with the shared seed. A failing cell is recorded and
/// the remaining cells still run.
pub fn run_ablation(base: &ExperimentConfig, grid: &Grid, echo: bool) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let cells = grid.cells(&base.model.aggregation)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        if echo {
            eprintln!("== cell {} ==", cell.label);
        }
        let mut model = base.model.clone();
        model.aggregation = cell.spec;
        let outcome = catch_unwind(AssertUnwindSafe(|| run_cell(base, cell, echo)))
            .unwrap_or_else(|_| Err(CliError::Usage("cell panicked".into())));
        let spec = cell.spec;
        let mut row = AblationRow {
            cell: cell.label.clone(),
            structure: spec.structure.as_str(),
            formula: spec.formula.as_str(),
            position: spec.position.as_str(),
            status: "ok",
            params: count_params(&model).total,
            final_loss: None,
            token_accuracy: None,
            exact_match: None,
            bleu: None,
            error: None,
        };
        match outcome {
            Ok((loss, acc, exact, bleu)) => {
                row.final_loss = Some(loss);
                row.token_accuracy = Some(acc);
                row.exact_match = Some(exact);
                row.bleu = Some(bleu);
            }
            Err(e) => {
                if echo {
                    eprintln!("cell {} failed: {e}", cell.label);
                }
                row.status = "failed";
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Fixed-width table for the terminal.
pub fn format_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>, scale: f64| v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x * scale));
    let mut s = format!(
        "{:<36} {:>10} {:>10} {:>9} {:>9} {:>8}  {}\n",
        "cell", "params", "loss", "tok acc", "exact", "BLEU", "status"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<36} {:>10} {:>10} {:>9} {:>9} {:>8}  {}\n",
            r.cell,
            r.params,
            opt(r.final_loss, 1.0),
            opt(r.token_accuracy, 1.0),
            opt(r.exact_match, 1.0),
            r.bleu.map_or_else(|| "-".to_string(), |b| format!("{:.2}", 100.0 * b)),
            r.status
        ));
    }
    s
}
