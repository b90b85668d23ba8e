//! Synthetic sequence-to-sequence tasks.
//!
//! Every possible source sequence is assigned to exactly one split by a hash
//! of its tokens, so held-out inputs can never appear in training data no
//! matter how many samples are drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::NUM_SPECIAL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Number of hash buckets; one goes to test, one to valid, the rest to train.
const BUCKETS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Includes the special tokens; content ids are `NUM_SPECIAL..vocab_size`.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticTask {
    pub fn copy(vocab_size: usize, min_len: usize, max_len: usize) -> Self {
        SyntheticTask {
            kind: TaskKind::Copy,
            vocab_size,
            min_len,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIAL + 1 {
            return Err(Error::config("task.vocab_size", "needs at least two content tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("task.min_len", "need 1 <= min_len <= max_len"));
        }
        Ok(())
    }

    pub fn target(&self, source: &[usize]) -> Vec<usize> {
        let mut t = source.to_vec();
        match self.kind {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::Sort => t.sort_unstable(),
        }
        t
    }

    /// Draws one source sequence belonging to `split`.
    pub fn sample(&self, split: Split, rng: &mut ChaCha8Rng) -> Vec<usize> {
        loop {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(NUM_SPECIAL..self.vocab_size)).collect();
            if split_of(&seq) == split {
                return seq;
            }
        }
    }
}

/// The split a source sequence belongs to.
pub fn split_of(seq: &[usize]) -> Split {
    let mut h = Sha256::new();
    for &t in seq {
        h.update((t as u32).to_le_bytes());
    }
    let digest = h.finalize();
    match u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % BUCKETS {
        0 => Split::Test,
        1 => Split::Valid,
        _ => Split::Train,
    }
}

/// Deterministic `(source, target)` pairs for one split.
pub fn generate_task(task: &SyntheticTask, split: Split, count: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    task.validate()?;
    let stream = match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok((0..count)
        .map(|_| {
            let s = task.sample(split, &mut rng);
            let t = task.target(&s);
            (s, t)
        })
        .collect())
}
