//! Optimization, training runs, decoding and evaluation.

mod adam;
mod average;
mod beam;
mod bleu;
mod eval;
mod tasks;
mod trainer;

pub use adam::{lr_schedule, Adam, AdamConfig};
pub use average::average_checkpoints;
pub use beam::{beam_search, beam_search_with, compare_finished, greedy_decode, length_penalty, BeamConfig, Hypothesis};
pub use bleu::{bleu, BleuReport};
pub use eval::{decode_all, evaluate, EvalReport};
pub use tasks::{generate_task, split_of, Split, SyntheticTask, TaskKind};
pub use trainer::{
    checkpoint_dir, checkpoint_path, count_correct, list_checkpoints, metrics_path, optimizer_path, read_metrics,
    train, training_batch, StepMetrics, StepOutcome, TrainConfig, TrainState, TrainSummary,
};
