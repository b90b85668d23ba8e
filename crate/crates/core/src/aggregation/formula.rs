use crate::error::{Error, Result};
use crate::nn::{FeedForward, Forward, LayerNorm};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Float, Tape, Tensor, Var};

use super::{FormulaDims, FormulaKind};

fn same_shape<T: Float>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `0.5 * (a + b)`.
pub fn agg_mean<T: Float>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "agg_mean", a, b)?;
    let s = tape.add(a, b)?;
    tape.scale(s, T::from_f64(0.5))
}

/// `FFN(concat(a, b))` with a `2d -> inner -> d` feed-forward network.
pub fn agg_concat_ffn<T: Float>(fw: &Forward<'_, T>, ffn: &FeedForward, a: Var, b: Var) -> Result<Var> {
    same_shape(fw.tape, "agg_concat_ffn", a, b)?;
    let cat = fw.tape.concat_last_dim(a, b)?;
    ffn.forward(fw, cat)
}

/// `sumb = beta * (a + b)`; `dropout(FFN(LN(sumb))) + sumb`.
pub fn agg_ewp_ffn<T: Float>(
    fw: &Forward<'_, T>,
    norm: &LayerNorm,
    ffn: &FeedForward,
    beta: ParamId,
    dropout: f64,
    a: Var,
    b: Var,
) -> Result<Var> {
    let tape = fw.tape;
    same_shape(tape, "agg_ewp_ffn", a, b)?;
    let sum = tape.add(a, b)?;
    let sumb = tape.scale_by(sum, fw.param(beta))?;
    let h = norm.forward(fw, sumb)?;
    let h = ffn.forward(fw, h)?;
    let h = fw.dropout(h, dropout)?;
    tape.add(h, sumb)
}

/// One aggregation node's formula and parameters.
#[derive(Clone, Debug)]
pub enum AggFormula {
    Mean,
    ConcatFfn {
        ffn: FeedForward,
    },
    EwpFfn {
        norm: LayerNorm,
        ffn: FeedForward,
        /// Trainable scalar, shape `[1]`, initialized to 1.
        beta: ParamId,
        dropout: f64,
    },
}

impl AggFormula {
    pub fn new<T: Float>(
        dims: FormulaDims,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
    ) -> Result<Self> {
        let (d, a) = (dims.d_model, dims.inner_dim);
        Ok(match dims.kind {
            FormulaKind::Mean => AggFormula::Mean,
            FormulaKind::ConcatFfn => AggFormula::ConcatFfn {
                ffn: FeedForward::new(store, init, &format!("{name}.ffn"), 2 * d, a, d)?,
            },
            FormulaKind::EwpFfn => AggFormula::EwpFfn {
                norm: LayerNorm::new(store, &format!("{name}.norm"), d, dims.eps)?,
                ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d, a, d)?,
                beta: store.add(format!("{name}.beta"), Tensor::ones(&[1]))?,
                dropout: dims.dropout,
            },
        })
    }

    /// Mean: 0. ConcatFfn: `(2d*a + a) + (a*d + d)`.
    /// EwpFfn: `(d*a + a) + (a*d + d) + 2d + 1`.
    pub fn num_params(kind: FormulaKind, d: usize, a: usize) -> usize {
        match kind {
            FormulaKind::Mean => 0,
            FormulaKind::ConcatFfn => (2 * d * a + a) + (a * d + d),
            FormulaKind::EwpFfn => (d * a + a) + (a * d + d) + 2 * d + 1,
        }
    }

    pub fn kind(&self) -> FormulaKind {
        match self {
            AggFormula::Mean => FormulaKind::Mean,
            AggFormula::ConcatFfn { .. } => FormulaKind::ConcatFfn,
            AggFormula::EwpFfn { .. } => FormulaKind::EwpFfn,
        }
    }

    pub fn apply<T: Float>(&self, fw: &Forward<'_, T>, a: Var, b: Var) -> Result<Var> {
        match self {
            AggFormula::Mean => agg_mean(fw.tape, a, b),
            AggFormula::ConcatFfn { ffn } => agg_concat_ffn(fw, ffn, a, b),
            AggFormula::EwpFfn {
                norm,
                ffn,
                beta,
                dropout,
            } => agg_ewp_ffn(fw, norm, ffn, *beta, *dropout, a, b),
        }
    }
}
