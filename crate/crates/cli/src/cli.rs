//! Argument definitions and subcommand dispatch.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rtal::aggregation::{FormulaKind, Structure};
use rtal::diagnostics::gradient_suite;
use rtal::model::{ModelConfig, Position};
use rtal::train::BeamConfig;
use serde::de::DeserializeOwned;

use crate::ablate::{format_table, run_ablation, write_csv, Grid};
use crate::config::ExperimentConfig;
use crate::decode::{average_last, decode_sources, format_sequences, load_model, read_sequences, score, Weights, AVERAGED_FILE};
use crate::error::{CliError, Result};
use crate::report::{format_gradcheck, params_report};
use crate::run::run_training;

/// Parses a snake_case enum name through its serde representation.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "rtal", version, about = "Transformer training with residual tree aggregation of layers")]
pub struct Cli {
    /// Only print results, not progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Train one model per cell of an aggregation grid and report a CSV.
    Ablate(AblateArgs),
    /// Print the itemized parameter count of a model.
    Params(ParamsArgs),
    /// Decode a file of token-id sequences with a trained run.
    Decode(DecodeArgs),
    /// Average the newest k checkpoints of a run.
    Average(AverageArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Total training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Seed for initialization, data and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<Structure>)]
    pub structure: Option<Structure>,
    #[arg(long, value_parser = parse_enum::<FormulaKind>)]
    pub formula: Option<FormulaKind>,
    #[arg(long, value_parser = parse_enum::<Position>)]
    pub position: Option<Position>,
    #[arg(long)]
    pub num_layers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.resolve_seed();
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        let agg = &mut cfg.model.aggregation;
        if let Some(s) = self.structure {
            agg.structure = s;
        }
        if let Some(f) = self.formula {
            agg.formula = f;
        }
        if let Some(p) = self.position {
            agg.position = p;
        }
        if let Some(l) = self.num_layers {
            cfg.model.num_layers = l;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON) or an existing run directory.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Structures to compare (comma separated).
    #[arg(long = "structures", value_delimiter = ',', value_parser = parse_enum::<Structure>)]
    pub structures: Vec<Structure>,
    /// Formulas to compare (comma separated).
    #[arg(long = "formulas", value_delimiter = ',', value_parser = parse_enum::<FormulaKind>)]
    pub formulas: Vec<FormulaKind>,
    /// Positions to compare (comma separated).
    #[arg(long = "positions", value_delimiter = ',', value_parser = parse_enum::<Position>)]
    pub positions: Vec<Position>,
    /// Add a row for the model without aggregation.
    #[arg(long)]
    pub baseline: bool,
    /// CSV destination; defaults to `ablation.csv` in the output directory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Experiment config or run directory.
    #[arg(long, short, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in architecture: base, big or toy.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_parser = parse_enum::<Structure>)]
    pub structure: Option<Structure>,
    #[arg(long, value_parser = parse_enum::<FormulaKind>)]
    pub formula: Option<FormulaKind>,
    #[arg(long, value_parser = parse_enum::<Position>)]
    pub position: Option<Position>,
    /// Also write the report as JSON to this path (`-` for stdout only).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// One whitespace-separated token-id sequence per line.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Maximum generated tokens including EOS; the model's max_len by default.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Argmax decoding instead of beam search.
    #[arg(long, conflicts_with = "beam")]
    pub greedy: bool,
    /// Decode with the newest checkpoint instead of the average.
    #[arg(long, conflicts_with = "checkpoint")]
    pub last: bool,
    /// Decode with a specific checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reference sequences; enables the exact-match and BLEU report.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Write the score report as JSON.
    #[arg(long, requires = "references")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Number of newest checkpoints to average.
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
    /// Destination; `averaged.bin` in the run directory by default.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn run(cli: Cli) -> Result<()> {
    let echo = !cli.quiet;
    match cli.command {
        Command::Train(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            a.overrides.apply(&mut cfg);
            let out = run_training(&cfg, a.resume, echo)?;
            println!("run directory: {}", out.run_dir.display());
            if let Some(m) = out.last_metrics {
                println!("final step {}: loss {:.5}, token accuracy {:.4}", m.step, m.loss, m.token_accuracy);
            }
            if let Some(v) = out.validation {
                println!("validation exact match {:.4}, BLEU {:.2}", v.exact_match, 100.0 * v.bleu.score);
            }
        }
        Command::Ablate(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            Overrides {
                steps: a.steps,
                seed: a.seed,
                output_dir: a.output_dir,
                ..Default::default()
            }
            .apply(&mut cfg);
            let grid = Grid {
                structures: a.structures,
                formulas: a.formulas,
                positions: a.positions,
                baseline: a.baseline,
            };
            let rows = run_ablation(&cfg, &grid, echo)?;
            let csv = a.csv.unwrap_or_else(|| cfg.output_dir.join("ablation.csv"));
            fs::create_dir_all(&cfg.output_dir).map_err(CliError::io(&cfg.output_dir))?;
            write_csv(&rows, &csv)?;
            print!("{}", format_table(&rows));
            println!("report: {}", csv.display());
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", rows.len());
            }
        }
        Command::Params(a) => {
            let mut model = match (&a.config, a.preset.as_deref()) {
                (Some(path), _) => ExperimentConfig::load(path)?.model,
                (None, Some("base")) => ModelConfig::base(),
                (None, Some("big")) => ModelConfig::big(),
                (None, Some("toy")) => ModelConfig::toy(16),
                (None, Some(other)) => {
                    return Err(CliError::Usage(format!("unknown preset `{other}`; expected base, big or toy")))
                }
                (None, None) => return Err(CliError::Usage("give --config or --preset".into())),
            };
            let agg = &mut model.aggregation;
            if let Some(s) = a.structure {
                agg.structure = s;
            }
            if let Some(f) = a.formula {
                agg.formula = f;
            }
            if let Some(p) = a.position {
                agg.position = p;
            }
            model.validate()?;
            let report = params_report(&model);
            let json = serde_json::to_string_pretty(&report)?;
            match &a.json {
                Some(p) if p.as_os_str() == "-" => println!("{json}"),
                Some(p) => {
                    write_file(p, &(json + "\n"))?;
                    println!("{report}");
                }
                None => println!("{report}"),
            }
        }
        Command::Decode(a) => {
            let weights = match (&a.checkpoint, a.last) {
                (Some(p), _) => Weights::File(p.clone()),
                (None, true) => Weights::Last,
                (None, false) => Weights::Averaged,
            };
            let (cfg, model, params, source) = load_model(&a.run_dir, &weights)?;
            let sources = read_sequences(&a.input, cfg.model.vocab_size)?;
            let max_len = a.max_len.unwrap_or(cfg.model.max_len);
            let beam = BeamConfig {
                beam_size: a.beam,
                alpha: a.alpha,
                max_len,
            };
            let (outputs, unfinished) = decode_sources(&model, &params, &sources, (!a.greedy).then_some(&beam), max_len)?;
            let text = format_sequences(&outputs);
            match &a.output {
                Some(p) => write_file(p, &text)?,
                None => print!("{text}"),
            }
            if echo {
                eprintln!("decoded {} sentences with {source}", outputs.len());
            }
            if let Some(refs) = &a.references {
                let references = read_sequences(refs, cfg.model.vocab_size)?;
                let report = score(&outputs, &references, unfinished, source)?;
                eprintln!("exact match {:.4}, unfinished {}", report.exact_match, report.unfinished);
                eprintln!("{}", report.bleu);
                if let Some(p) = &a.report {
                    write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
                }
            }
        }
        Command::Average(a) => {
            let ck = average_last(&a.run_dir, a.k)?;
            let out = a.output.unwrap_or_else(|| a.run_dir.join(AVERAGED_FILE));
            ck.save(&out)?;
            println!("averaged {} checkpoints up to step {} into {}", a.k, ck.step, out.display());
        }
        Command::Gradcheck(a) => {
            let cases = gradient_suite(a.seed)?;
            print!("{}", format_gradcheck(&cases));
            if let Some(p) = &a.json {
                write_file(p, &(serde_json::to_string_pretty(&cases)? + "\n"))?;
            }
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}
