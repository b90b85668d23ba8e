//! Sequence-to-sequence Transformer with pluggable cross-layer aggregation.
//!
//! The centerpiece is residual tree aggregation of layers (RTAL): the
//! outputs of the last `2^n` encoder or decoder layers are fused bottom-up
//! through a balanced binary tree whose internal nodes apply an aggregation
//! formula and, except at the root, add a residual from the deeper child.
//!
//! Layout:
//! - [`tensor`]: dense tensors, the reverse-mode tape, gradient checking
//! - [`nn`]: attention, feed-forward, embeddings, label-smoothed loss
//! - [`aggregation`]: aggregation formulas, the RTAL tree and baselines
//! - [`model`]: configuration, the seq2seq model, parameter counting, checkpoints
//! - [`train`]: Adam, schedules, the training loop, beam search, BLEU, tasks

pub mod aggregation;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
