//! Transformer building blocks.

mod attention;
mod embedding;
mod layers;

pub use attention::{scaled_dot_attention, MultiHeadAttention};
pub use embedding::{embed, sinusoidal_positions};
pub use layers::{DecoderLayer, EncoderLayer};

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Everything a module needs to run forward: the tape, the parameter
/// values, and, in training mode, the dropout random stream.
pub struct Forward<'a, T: Float> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a, T: Float> Forward<'a, T> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Forward {
            tape,
            params,
            rng: None,
        }
    }

    pub fn train(tape: &'a Tape<T>, params: &'a ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Forward {
            tape,
            params,
            rng: Some(RefCell::new(rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        match &self.rng {
            Some(rng) => self.tape.dropout(x, rate, &mut *rng.borrow_mut()),
            None => Ok(x),
        }
    }
}

/// Affine map `x W + b` with `W: [in_dim, out_dim]`; the bias is optional.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.glorot(in_dim, out_dim))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// A pure projection `x W`.
    pub fn without_bias<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.glorot(in_dim, out_dim))?;
        Ok(Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// Accepts any input of rank >= 1 whose last dimension is `in_dim`.
    pub fn forward<T: Float>(&self, fw: &Forward<'_, T>, x: Var) -> Result<Var> {
        let tape = fw.tape;
        let vector = tape.shape(x).len() == 1;
        let x = if vector { tape.reshape(x, &[1, self.in_dim])? } else { x };
        let mut h = tape.matmul(x, fw.param(self.weight))?;
        if let Some(b) = self.bias {
            h = tape.add(h, fw.param(b))?;
        }
        if vector {
            h = tape.reshape(h, &[self.out_dim])?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Float>(&self, fw: &Forward<'_, T>, x: Var) -> Result<Var> {
        fw.tape.layer_norm(
            x,
            fw.param(self.gamma),
            fw.param(self.beta),
            T::from_f64(self.eps),
        )
    }
}

/// Position-wise feed-forward network `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, init, &format!("{name}.inner"), in_dim, hidden)?,
            outer: Linear::new(store, init, &format!("{name}.outer"), hidden, out_dim)?,
        })
    }

    pub fn num_params(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        Linear::num_params(in_dim, hidden) + Linear::num_params(hidden, out_dim)
    }

    pub fn forward<T: Float>(&self, fw: &Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(fw, x)?;
        let h = fw.tape.relu(h)?;
        self.outer.forward(fw, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn set(store: &mut ParamStore<f64>, id: ParamId, v: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::from_f64(&shape, v).unwrap();
    }

    #[test]
    fn ffn_zero_input_zero_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(1);
        let ffn = FeedForward::new(&mut store, &mut init, "ffn", 3, 5, 3).unwrap();
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = ffn.forward(&fw, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn ffn_identity_weights_pass_relu() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(1);
        let ffn = FeedForward::new(&mut store, &mut init, "ffn", 2, 2, 2).unwrap();
        set(&mut store, ffn.inner.weight, &[1., 0., 0., 1.]);
        set(&mut store, ffn.outer.weight, &[1., 0., 0., 1.]);
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let x = tape.constant(Tensor::from_f64(&[2], &[-1., 2.]).unwrap().reshape(&[1, 2]).unwrap());
        let y = ffn.forward(&fw, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 2.]);
    }

    #[test]
    fn ffn_matches_scalar_loops() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(9);
        let ffn = FeedForward::new(&mut store, &mut init, "ffn", 4, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in [ffn.inner.bias.unwrap(), ffn.outer.bias.unwrap()] {
            let n = store.value(id).numel();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            set(&mut store, id, &v);
        }
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let xv = tape.constant(Tensor::from_f64(&[2, 4], &x).unwrap());
        let y = tape.value(ffn.forward(&fw, xv).unwrap()).clone();

        let w1 = store.value(ffn.inner.weight).data();
        let b1 = store.value(ffn.inner.bias.unwrap()).data();
        let w2 = store.value(ffn.outer.weight).data();
        let b2 = store.value(ffn.outer.bias.unwrap()).data();
        for r in 0..2 {
            let mut hidden = [0.0; 8];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = b1[j];
                for i in 0..4 {
                    s += x[r * 4 + i] * w1[i * 8 + j];
                }
                *h = s.max(0.0);
            }
            for o in 0..4 {
                let mut s = b2[o];
                for (j, h) in hidden.iter().enumerate() {
                    s += h * w2[j * 4 + o];
                }
                assert!((y.data()[r * 4 + o] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn eval_mode_skips_dropout() {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let x = tape.constant(Tensor::ones(&[4]));
        assert_eq!(fw.dropout(x, 0.5).unwrap(), x);
        let fw = Forward::train(&tape, &store, ChaCha8Rng::seed_from_u64(0));
        assert_ne!(fw.dropout(x, 0.5).unwrap(), x);
    }
}
