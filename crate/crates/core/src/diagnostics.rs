//! Finite-difference gradient suite over every differentiable building block.
//!
//! Each case perturbs its inputs and parameters in double precision with a
//! central difference and reports the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{AggFormula, AggTree, FormulaDims, FormulaKind, Structure};
use crate::error::Result;
use crate::model::{AggregationSpec, Batch, ModelConfig, Position, Seq2SeqModel};
use crate::nn::{DecoderLayer, EncoderLayer, FeedForward, Forward, MultiHeadAttention};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{grad_check, grad_check_many, grad_check_params, Mask, Tensor};

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Moves biases, layer-norm shifts and gains and EWP scales off their
/// initial values so their gradients are not trivially symmetric.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        if [".bias", ".beta", ".gamma"].iter().any(|s| name.ends_with(s)) {
            for v in store.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

fn dims(kind: FormulaKind, d: usize, a: usize) -> FormulaDims {
    FormulaDims {
        kind,
        d_model: d,
        inner_dim: a,
        dropout: 0.0,
        eps: 1e-6,
    }
}

/// Runs every case. Failures are reported, not returned as errors.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, err: f64| {
        cases.push(GradCase {
            name: name.to_string(),
            max_rel_error: err,
        })
    };

    let x = random(&mut rng, &[3, 5]);
    push("softmax", grad_check(|t, v| t.softmax_last_dim(v, None), &x, STEP)?);
    let mask = Mask::new(vec![3, 5], (0..15).map(|i| i % 5 < 3 + i / 5 % 2).collect())?;
    push(
        "softmax (masked)",
        grad_check(|t, v| t.softmax_last_dim(v, Some(&mask)), &x, STEP)?,
    );

    let gamma = Tensor::from_fn(&[5], |_| rng.gen_range(0.5..1.5));
    let shift = random(&mut rng, &[5]);
    push(
        "layer norm",
        grad_check_many(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[x.clone(), gamma, shift], STEP)?,
    );

    {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed ^ 1);
        let ffn = FeedForward::new(&mut store, &mut init, "ffn", 4, 6, 4)?;
        jitter(&mut store, &mut rng);
        let x = random(&mut rng, &[2, 3, 4]);
        let inputs = grad_check(|t, v| ffn.forward(&Forward::eval(t, &store), v), &x, STEP)?;
        let params = grad_check_params(
            &mut store,
            |t, p| ffn.forward(&Forward::eval(t, p), t.constant(x.clone())),
            STEP,
        )?;
        push("feed-forward", inputs.max(params.max_rel_error));
    }

    {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed ^ 2);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", 4, 2)?;
        let q = random(&mut rng, &[2, 3, 4]);
        let kv = random(&mut rng, &[2, 2, 4]);
        let mask = Mask::new(vec![2, 1, 1, 2], vec![true, true, true, false])?;
        let inputs = grad_check_many(
            |t, v| mha.forward(&Forward::eval(t, &store), v[0], v[1], v[1], Some(&mask)),
            &[q.clone(), kv.clone()],
            STEP,
        )?;
        let params = grad_check_params(
            &mut store,
            |t, p| {
                let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
                mha.forward(&Forward::eval(t, p), qv, kvv, kvv, Some(&mask))
            },
            STEP,
        )?;
        push("multi-head attention", inputs.max(params.max_rel_error));
    }

    {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed ^ 3);
        let enc = EncoderLayer::new(&mut store, &mut init, "enc", 4, 2, 8, 0.0, 1e-6)?;
        let dec = DecoderLayer::new(&mut store, &mut init, "dec", 4, 2, 8, 0.0, 1e-6)?;
        jitter(&mut store, &mut rng);
        let x = random(&mut rng, &[2, 3, 4]);
        let y = random(&mut rng, &[2, 2, 4]);
        let causal = Mask::causal(2);
        let report = grad_check_params(
            &mut store,
            |t, p| {
                let fw = Forward::eval(t, p);
                let mem = enc.forward(&fw, t.constant(x.clone()), None)?;
                dec.forward(&fw, t.constant(y.clone()), mem, Some(&causal), None)
            },
            STEP,
        )?;
        push("encoder + decoder layer", report.max_rel_error);
    }

    for kind in FormulaKind::ALL {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed ^ 4);
        let f = AggFormula::new(dims(kind, 4, 6), &mut store, &mut init, "agg")?;
        jitter(&mut store, &mut rng);
        let a = random(&mut rng, &[2, 4]);
        let b = random(&mut rng, &[2, 4]);
        let mut err = grad_check_many(
            |t, v| f.apply(&Forward::eval(t, &store), v[0], v[1]),
            &[a.clone(), b.clone()],
            STEP,
        )?;
        if !store.is_empty() {
            let report = grad_check_params(
                &mut store,
                |t, p| f.apply(&Forward::eval(t, p), t.constant(a.clone()), t.constant(b.clone())),
                STEP,
            )?;
            err = err.max(report.max_rel_error);
        }
        push(&format!("formula {}", kind.as_str()), err);
    }

    for kind in FormulaKind::ALL {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed ^ 5);
        let tree = AggTree::new(4, true, dims(kind, 3, 5), &mut store, &mut init, "tree")?;
        jitter(&mut store, &mut rng);
        let leaves: Vec<_> = (0..4).map(|_| random(&mut rng, &[2, 3])).collect();
        let mut err = grad_check_many(|t, v| tree.aggregate(&Forward::eval(t, &store), v), &leaves, STEP)?;
        if !store.is_empty() {
            let report = grad_check_params(
                &mut store,
                |t, p| {
                    let vars: Vec<_> = leaves.iter().map(|l| t.constant(l.clone())).collect();
                    tree.aggregate(&Forward::eval(t, p), &vars)
                },
                STEP,
            )?;
            err = err.max(report.max_rel_error);
        }
        push(&format!("RTAL tree, 4 leaves, {}", kind.as_str()), err);
    }

    {
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 4,
            num_heads: 2,
            d_ff: 6,
            vocab_size: 7,
            max_len: 8,
            dropout: 0.0,
            aggregation: AggregationSpec::new(Structure::Rtal, FormulaKind::EwpFfn, Position::Both),
            agg_inner_dim: Some(3),
            ln_eps: 1e-6,
            seed,
        };
        let (model, mut store) = Seq2SeqModel::build::<f64>(&cfg)?;
        jitter(&mut store, &mut rng);
        let batch = Batch::from_pairs(&[(vec![3, 4, 5], vec![6, 4]), (vec![5, 6], vec![3, 3, 4])])?;
        let report = grad_check_params(
            &mut store,
            |t, p| model.loss(&Forward::eval(t, p), &batch, 0.1).map(|(_, l)| l),
            STEP,
        )?;
        push("encoder-decoder to loss", report.max_rel_error);
    }

    Ok(cases)
}
