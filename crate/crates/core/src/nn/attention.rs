use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Mask, Tape, Var};

use super::{Forward, Linear};

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two dimensions, where `d_k`
/// is the key width of a single head.
pub fn scaled_dot_attention<T: Float>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let d_k = *tape.shape(k).last().expect("rank checked by matmul");
    let kt = tape.transpose_last_two(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()))?;
    let weights = tape.softmax_last_dim(scores, mask)?;
    tape.matmul(weights, v)
}

/// Multi-head attention with per-head projections packed into `d x d`
/// matrices: head `h` uses columns `h * d_head..(h + 1) * d_head`.
/// Projections carry no bias.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_model: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("d_model {d_model} is not divisible by {num_heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            query: Linear::without_bias(store, init, &format!("{name}.query"), d_model, d_model)?,
            key: Linear::without_bias(store, init, &format!("{name}.key"), d_model, d_model)?,
            value: Linear::without_bias(store, init, &format!("{name}.value"), d_model, d_model)?,
            output: Linear::without_bias(store, init, &format!("{name}.output"), d_model, d_model)?,
            num_heads,
            d_model,
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * d_model * d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// `[B, T, d] -> [B, H, T, d_head]`
    fn split_heads<T: Float>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let x = tape.reshape(x, &[s[0], s[1], self.num_heads, self.d_head()])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Inputs are `[B, T, d_model]`; `mask`, when given, broadcasts to
    /// `[B, H, T_q, T_k]`.
    pub fn forward<T: Float>(
        &self,
        fw: &Forward<'_, T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let tape = fw.tape;
        let qs = tape.shape(q_in);
        if qs.len() != 3 || qs[2] != self.d_model {
            return Err(Error::shape(
                "multi_head_attention",
                format!("expected [B, T, {}], got {qs:?}", self.d_model),
            ));
        }
        let q = self.split_heads(tape, self.query.forward(fw, q_in)?)?;
        let k = self.split_heads(tape, self.key.forward(fw, k_in)?)?;
        let v = self.split_heads(tape, self.value.forward(fw, v_in)?)?;
        let heads = scaled_dot_attention(tape, q, k, v, mask)?;
        let merged = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[qs[0], qs[1], self.d_model])?;
        self.output.forward(fw, merged)
    }
}
