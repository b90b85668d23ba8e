//! Encoder-decoder Transformer with optional cross-layer aggregation.
//!
//! Parameters live in a [`ParamStore`] owned by the caller; the model only
//! holds handles, so the same model drives f32 training and f64 checks.

mod checkpoint;
mod config;

pub use checkpoint::Checkpoint;
pub use config::{count_params, AggregationSpec, ModelConfig, ParamCount, Position};

use std::ops::Range;

use crate::aggregation::{Aggregator, FormulaDims};
use crate::error::{Error, Result};
use crate::nn::{embed, sinusoidal_positions, DecoderLayer, EncoderLayer, Forward, LayerNorm};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Float, Mask, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIAL: usize = 3;

/// Padded token matrices for one training step.
///
/// Sources get a trailing EOS. The decoder input is `BOS + target` and the
/// expected output is `target + EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src: Vec<usize>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_len: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let src_len = pairs.iter().map(|p| p.0.len() + 1).max().unwrap_or(1);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut b = Batch {
            size: pairs.len(),
            src: vec![PAD; pairs.len() * src_len],
            src_len,
            tgt_in: vec![PAD; pairs.len() * tgt_len],
            tgt_out: vec![PAD; pairs.len() * tgt_len],
            tgt_len,
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            if s.iter().chain(t).any(|&tok| tok < NUM_SPECIAL) {
                return Err(Error::Invalid(format!("pair {i} contains a reserved token id")));
            }
            let src = &mut b.src[i * src_len..];
            src[..s.len()].copy_from_slice(s);
            src[s.len()] = EOS;
            let tin = &mut b.tgt_in[i * tgt_len..];
            tin[0] = BOS;
            tin[1..=t.len()].copy_from_slice(t);
            let tout = &mut b.tgt_out[i * tgt_len..];
            tout[..t.len()].copy_from_slice(t);
            tout[t.len()] = EOS;
        }
        Ok(b)
    }

    /// Non-pad target positions.
    pub fn num_target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// `[batch, 1, 1, len]` mask hiding PAD keys.
pub fn padding_mask(ids: &[usize], batch: usize, len: usize) -> Mask {
    Mask::from_fn(&[batch, 1, 1, len], |i| ids[i[0] * len + i[3]] != PAD)
}

/// Encoder output for a batch of sources, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncoderMemory<T: Float> {
    /// `[batch, src_len, d_model]`, after aggregation and the final norm.
    pub states: Tensor<T>,
    pub mask: Mask,
}

impl<T: Float> EncoderMemory<T> {
    pub fn batch(&self) -> usize {
        self.states.shape()[0]
    }

    /// Repeats batch entry `index` `n` times.
    pub fn tile(&self, index: usize, n: usize) -> Result<Self> {
        let (b, s, d) = (self.states.shape()[0], self.states.shape()[1], self.states.shape()[2]);
        if index >= b || n == 0 {
            return Err(Error::Invalid(format!("cannot tile entry {index} of {b} x{n}")));
        }
        let row = &self.states.data()[index * s * d..(index + 1) * s * d];
        let states = Tensor::new(vec![n, s, d], row.repeat(n))?;
        let mrow = &self.mask.data()[index * s..(index + 1) * s];
        let mask = Mask::new(vec![n, 1, 1, s], mrow.repeat(n))?;
        Ok(EncoderMemory { states, mask })
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    /// `[vocab, d_model]`; input embedding for both sides and output projection.
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder_norm: LayerNorm,
    pub encoder_agg: Option<Aggregator>,
    pub decoder_agg: Option<Aggregator>,
}

impl Seq2SeqModel {
    /// Builds the model and a freshly initialized parameter store. Layer
    /// parameters are created before any aggregator, so they are identical
    /// across aggregation settings for the same seed.
    pub fn build<T: Float>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(c.seed);
        let bound = (3.0 / c.d_model as f64).sqrt();
        let embedding = store.add("embedding", init.uniform(&[c.vocab_size, c.d_model], bound))?;
        let encoder = (0..c.num_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &mut init,
                    &format!("encoder.layer{i}"),
                    c.d_model,
                    c.num_heads,
                    c.d_ff,
                    c.dropout,
                    c.ln_eps,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", c.d_model, c.ln_eps)?;
        let decoder = (0..c.num_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &mut init,
                    &format!("decoder.layer{i}"),
                    c.d_model,
                    c.num_heads,
                    c.d_ff,
                    c.dropout,
                    c.ln_eps,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", c.d_model, c.ln_eps)?;

        let span = c.aggregated_span().map_or(0, |r| r.len());
        let dims = FormulaDims {
            kind: c.aggregation.formula,
            d_model: c.d_model,
            inner_dim: c.inner_dim(),
            dropout: c.dropout,
            eps: c.ln_eps,
        };
        let mut agg_init = Initializer::new(c.seed ^ 0xa66e_0000_0000_0001);
        let mut build_agg = |active: bool, name: &str, store: &mut ParamStore<T>| -> Result<Option<Aggregator>> {
            if !active {
                return Ok(None);
            }
            Aggregator::build(c.aggregation.structure, span, dims, store, &mut agg_init, name)
        };
        let encoder_agg = build_agg(c.aggregation.encoder_active(), "encoder.agg", &mut store)?;
        let decoder_agg = build_agg(c.aggregation.decoder_active(), "decoder.agg", &mut store)?;

        let model = Seq2SeqModel {
            config: c.clone(),
            embedding,
            encoder,
            decoder,
            encoder_norm,
            decoder_norm,
            encoder_agg,
            decoder_agg,
        };
        Ok((model, store))
    }

    pub fn span(&self) -> Option<Range<usize>> {
        self.config.aggregated_span()
    }

    fn embed_tokens<T: Float>(&self, fw: &Forward<'_, T>, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "embed",
                id: bad,
                extent: self.config.vocab_size,
            });
        }
        let positions = sinusoidal_positions::<T>(len, self.config.d_model);
        embed(fw, fw.param(self.embedding), &positions, ids, batch, len)
    }

    /// Top-layer output, or the aggregator root over the configured span.
    fn fuse<T: Float>(&self, fw: &Forward<'_, T>, agg: &Option<Aggregator>, outputs: &[Var]) -> Result<Var> {
        match (agg, self.span()) {
            (Some(agg), Some(span)) => agg.aggregate(fw, &outputs[span]),
            _ => Ok(*outputs.last().expect("at least one layer")),
        }
    }

    /// Runs the encoder over `[batch, len]` source ids. Returns the memory
    /// fed to cross-attention and the source padding mask.
    pub fn encode<T: Float>(&self, fw: &Forward<'_, T>, src: &[usize], batch: usize, len: usize) -> Result<(Var, Mask)> {
        let mask = padding_mask(src, batch, len);
        let mut x = self.embed_tokens(fw, src, batch, len)?;
        x = fw.dropout(x, self.config.dropout)?;
        let mut outputs = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            x = layer.forward(fw, x, Some(&mask))?;
            outputs.push(x);
        }
        let fused = self.fuse(fw, &self.encoder_agg, &outputs)?;
        Ok((self.encoder_norm.forward(fw, fused)?, mask))
    }

    /// Runs the decoder over `[batch, len]` input ids and returns logits
    /// `[batch, len, vocab]`.
    pub fn decode<T: Float>(
        &self,
        fw: &Forward<'_, T>,
        memory: Var,
        memory_mask: &Mask,
        tgt_in: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let tape = fw.tape;
        let self_mask = Mask::causal(len).and(&padding_mask(tgt_in, batch, len))?;
        let mut y = self.embed_tokens(fw, tgt_in, batch, len)?;
        y = fw.dropout(y, self.config.dropout)?;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            y = layer.forward(fw, y, memory, Some(&self_mask), Some(memory_mask))?;
            outputs.push(y);
        }
        let fused = self.fuse(fw, &self.decoder_agg, &outputs)?;
        let out = self.decoder_norm.forward(fw, fused)?;
        let table_t = tape.transpose_last_two(fw.param(self.embedding))?;
        tape.matmul(out, table_t)
    }

    /// Teacher-forced logits `[batch, tgt_len, vocab]`.
    pub fn forward_train<T: Float>(&self, fw: &Forward<'_, T>, batch: &Batch) -> Result<Var> {
        let (memory, mask) = self.encode(fw, &batch.src, batch.size, batch.src_len)?;
        self.decode(fw, memory, &mask, &batch.tgt_in, batch.size, batch.tgt_len)
    }

    /// Label-smoothed loss of a batch.
    pub fn loss<T: Float>(&self, fw: &Forward<'_, T>, batch: &Batch, smoothing: f64) -> Result<(Var, Var)> {
        let logits = self.forward_train(fw, batch)?;
        let loss = fw.tape.label_smoothed_ce(logits, &batch.tgt_out, smoothing, PAD)?;
        Ok((logits, loss))
    }

    /// Encodes raw source sequences (EOS appended, padded) in eval mode.
    pub fn encode_sources<T: Float>(&self, params: &ParamStore<T>, sources: &[Vec<usize>]) -> Result<EncoderMemory<T>> {
        if sources.is_empty() {
            return Err(Error::Invalid("no sources to encode".into()));
        }
        let len = sources.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut ids = vec![PAD; sources.len() * len];
        for (i, s) in sources.iter().enumerate() {
            ids[i * len..i * len + s.len()].copy_from_slice(s);
            ids[i * len + s.len()] = EOS;
        }
        let tape = Tape::inference();
        let fw = Forward::eval(&tape, params);
        let (memory, mask) = self.encode(&fw, &ids, sources.len(), len)?;
        let states = tape.value(memory).clone();
        Ok(EncoderMemory { states, mask })
    }

    /// Next-token log-probabilities for each prefix. All prefixes must have
    /// the same length and start with BOS. `memory` holds either one source
    /// (shared by every prefix) or one source per prefix.
    pub fn forward_step<T: Float>(
        &self,
        params: &ParamStore<T>,
        memory: &EncoderMemory<T>,
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if n == 0 || len == 0 {
            return Err(Error::Invalid("forward_step needs a non-empty prefix starting with BOS".into()));
        }
        if prefixes.iter().any(|p| p.len() != len || p[0] != BOS) {
            return Err(Error::Invalid("prefixes must share one length and start with BOS".into()));
        }
        let tiled;
        let memory = match memory.batch() {
            b if b == n => memory,
            1 => {
                tiled = memory.tile(0, n)?;
                &tiled
            }
            b => return Err(Error::Invalid(format!("memory batch {b} does not match {n} prefixes"))),
        };
        let ids: Vec<usize> = prefixes.concat();
        let tape = Tape::inference();
        let fw = Forward::eval(&tape, params);
        let mem = tape.constant(memory.states.clone());
        let logits = self.decode(&fw, mem, &memory.mask, &ids, n, len)?;
        let logits = tape.value(logits);
        let v = self.config.vocab_size;
        Ok((0..n)
            .map(|i| log_softmax(&logits.data()[(i * len + len - 1) * v..(i * len + len) * v]))
            .collect())
    }
}

/// Log-softmax of one row, in f64.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}
