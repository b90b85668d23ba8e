//! Encoder and decoder layers. Every sublayer is wrapped pre-norm:
//! `x + dropout(sublayer(LN(x)))`.

use crate::error::Result;
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Mask, Var};

use super::{FeedForward, Forward, LayerNorm, MultiHeadAttention};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub attn_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        dropout: f64,
        eps: f64,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d_model, num_heads)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d_model, d_ff, d_model)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model, eps)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model, eps)?,
            dropout,
        })
    }

    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        MultiHeadAttention::num_params(d_model)
            + FeedForward::num_params(d_model, d_ff, d_model)
            + 2 * LayerNorm::num_params(d_model)
    }

    pub fn forward<T: Float>(&self, fw: &Forward<'_, T>, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let tape = fw.tape;
        let h = self.attn_norm.forward(fw, x)?;
        let h = self.self_attn.forward(fw, h, h, h, mask)?;
        let h = fw.dropout(h, self.dropout)?;
        let x = tape.add(x, h)?;
        let h = self.ffn_norm.forward(fw, x)?;
        let h = self.ffn.forward(fw, h)?;
        let h = fw.dropout(h, self.dropout)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub self_norm: LayerNorm,
    pub cross_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        dropout: f64,
        eps: f64,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d_model, num_heads)?,
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), d_model, num_heads)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d_model, d_ff, d_model)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d_model, eps)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d_model, eps)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model, eps)?,
            dropout,
        })
    }

    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        2 * MultiHeadAttention::num_params(d_model)
            + FeedForward::num_params(d_model, d_ff, d_model)
            + 3 * LayerNorm::num_params(d_model)
    }

    /// `memory` is the (aggregated) encoder output; `self_mask` is causal plus
    /// target padding, `cross_mask` hides source padding.
    pub fn forward<T: Float>(
        &self,
        fw: &Forward<'_, T>,
        y: Var,
        memory: Var,
        self_mask: Option<&Mask>,
        cross_mask: Option<&Mask>,
    ) -> Result<Var> {
        let tape = fw.tape;
        let h = self.self_norm.forward(fw, y)?;
        let h = self.self_attn.forward(fw, h, h, h, self_mask)?;
        let h = fw.dropout(h, self.dropout)?;
        let y = tape.add(y, h)?;
        let h = self.cross_norm.forward(fw, y)?;
        let h = self.cross_attn.forward(fw, h, memory, memory, cross_mask)?;
        let h = fw.dropout(h, self.dropout)?;
        let y = tape.add(y, h)?;
        let h = self.ffn_norm.forward(fw, y)?;
        let h = self.ffn.forward(fw, h)?;
        let h = fw.dropout(h, self.dropout)?;
        tape.add(y, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma") {
                let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
                for v in store.value_mut(id).data_mut() {
                    *v = base + rng.gen_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(17);
        let layer = EncoderLayer::new(&mut store, &mut init, "enc", 4, 2, 8, 0.0, 1e-6).unwrap();
        randomize_biases(&mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mask = Mask::new(vec![2, 1, 1, 3], vec![true, true, true, true, true, false]).unwrap();
        let report = grad_check_params(
            &mut store,
            |tape, params| {
                let fw = Forward::eval(tape, params);
                let xv = tape.constant(x.clone());
                layer.forward(&fw, xv, Some(&mask))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn decoder_layer_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        let layer = DecoderLayer::new(&mut store, &mut init, "dec", 4, 2, 8, 0.0, 1e-6).unwrap();
        randomize_biases(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mem = Tensor::from_fn(&[2, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let causal = Mask::causal(3);
        let report = grad_check_params(
            &mut store,
            |tape, params| {
                let fw = Forward::eval(tape, params);
                let (yv, mv) = (tape.constant(y.clone()), tape.constant(mem.clone()));
                layer.forward(&fw, yv, mv, Some(&causal), None)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn param_counts_match_store() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(0);
        EncoderLayer::new(&mut store, &mut init, "e", 8, 2, 16, 0.1, 1e-6).unwrap();
        assert_eq!(store.num_scalars(), EncoderLayer::num_params(8, 16));
        let mut store = ParamStore::<f32>::new();
        DecoderLayer::new(&mut store, &mut init, "d", 8, 2, 16, 0.1, 1e-6).unwrap();
        assert_eq!(store.num_scalars(), DecoderLayer::num_params(8, 16));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(0);
        let layer = EncoderLayer::new(&mut store, &mut init, "e", 8, 2, 16, 0.3, 1e-6).unwrap();
        let run = || {
            let tape = Tape::new();
            let fw = Forward::eval(&tape, &store);
            let x = tape.constant(Tensor::from_fn(&[1, 3, 8], |i| (i as f32 * 0.37).sin()));
            let out = layer.forward(&fw, x, None).unwrap();
            let v = tape.value(out).clone();
            v
        };
        assert_eq!(run(), run());
    }
}
