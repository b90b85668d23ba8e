//! Training runs.

use std::fmt::Display;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rtal::model::count_params;
use rtal::train::{evaluate, generate_task, list_checkpoints, train, EvalReport, Split, StepMetrics, TrainState};
use serde::Serialize;

use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::error::{CliError, Result};

pub const LOG_FILE: &str = "run.log";
pub const EVAL_FILE: &str = "eval.jsonl";

/// Human-readable run log, optionally echoed to stderr.
pub struct RunLog {
    file: File,
    path: PathBuf,
    echo: bool,
}

impl RunLog {
    pub fn open(path: &Path, append: bool, echo: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(CliError::io(path))?;
        Ok(RunLog {
            file,
            path: path.to_path_buf(),
            echo,
        })
    }

    pub fn line(&mut self, msg: impl Display) -> Result<()> {
        if self.echo {
            eprintln!("{msg}");
        }
        writeln!(self.file, "{msg}").map_err(CliError::io(&self.path))
    }
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub split: Split,
    pub exact_match: f64,
    pub bleu: f64,
    pub unfinished: usize,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub state: TrainState,
    pub last_metrics: Option<StepMetrics>,
    pub validation: Option<EvalReport>,
}

/// Trains the configured model into `cfg.output_dir`, validating every
/// `eval.every` steps and once at the end.
pub fn run_training(cfg: &ExperimentConfig, resume: bool, echo: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let config_path = dir.join(CONFIG_FILE);
    if resume {
        let existing = ExperimentConfig::load(&config_path)?;
        if existing.model != cfg.model || existing.task != cfg.task || existing.seed != cfg.seed {
            return Err(CliError::Usage(format!(
                "{} was produced by a different model, task or seed; refusing to resume",
                dir.display()
            )));
        }
    } else if dir.exists() && !list_checkpoints(&dir)?.is_empty() {
        return Err(CliError::Usage(format!(
            "{} already holds checkpoints; pass --resume or choose another output_dir",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    cfg.save(&config_path)?;

    let mut log = RunLog::open(&dir.join(LOG_FILE), resume, echo)?;
    let m = &cfg.model;
    let agg = &m.aggregation;
    log.line(format_args!(
        "model: {} layers, d_model {}, {} heads, d_ff {}, vocab {}",
        m.num_layers, m.d_model, m.num_heads, m.d_ff, m.vocab_size
    ))?;
    log.line(format_args!(
        "aggregation: {} / {} / {}",
        agg.structure.as_str(),
        agg.formula.as_str(),
        agg.position.as_str()
    ))?;
    log.line(format_args!("aggregated span: {}", m.span_label()))?;
    log.line(format_args!("parameters: {}", count_params(m).total))?;

    let mut state = if resume {
        let state = TrainState::resume(&dir, m, cfg.train.adam)?;
        log.line(format_args!("resumed at step {}", state.step))?;
        state
    } else {
        TrainState::new(m, cfg.train.adam)?
    };

    let valid = generate_task(&cfg.task, Split::Valid, cfg.eval.sentences, cfg.seed)?;
    let mut targets: Vec<u64> = if cfg.eval.every == 0 {
        vec![]
    } else {
        (1..)
            .map(|i| i * cfg.eval.every)
            .take_while(|&s| s < cfg.train.steps)
            .filter(|&s| s > state.step)
            .collect()
    };
    targets.push(cfg.train.steps.max(state.step));

    let mut last_metrics = None;
    let mut validation = None;
    let mut eval_log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(dir.join(EVAL_FILE))
        .map_err(CliError::io(dir.join(EVAL_FILE)))?;
    for target in targets {
        let mut seg = cfg.train.clone();
        seg.steps = target;
        let before = state.step;
        let summary = train(&mut state, &cfg.task, &seg, &dir)?;
        if let Some(m) = &summary.last_metrics {
            log.line(format_args!(
                "step {}: loss {:.5}, token accuracy {:.4}, lr {:.3e}",
                m.step, m.loss, m.token_accuracy, m.lr
            ))?;
        }
        last_metrics = summary.last_metrics;
        if state.step == before && validation.is_some() {
            continue;
        }
        let report = evaluate(&state.model, &state.params, &valid, &cfg.eval.beam)?;
        log.line(format_args!(
            "step {}: validation exact match {:.4}, BLEU {:.2}, unfinished {}",
            state.step,
            report.exact_match,
            100.0 * report.bleu.score,
            report.unfinished
        ))?;
        let record = EvalRecord {
            step: state.step,
            split: Split::Valid,
            exact_match: report.exact_match,
            bleu: report.bleu.score,
            unfinished: report.unfinished,
        };
        writeln!(eval_log, "{}", serde_json::to_string(&record)?).map_err(CliError::io(dir.join(EVAL_FILE)))?;
        validation = Some(report);
    }
    Ok(TrainOutcome {
        run_dir: dir,
        state,
        last_metrics,
        validation,
    })
}
