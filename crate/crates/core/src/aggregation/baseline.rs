use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};

use super::{AggFormula, FormulaDims};

fn check_count(op: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Structure(format!(
            "{op} expects {expected} layer outputs, got {got}"
        )));
    }
    Ok(())
}

/// `sum_l softmax(w)_l * h_l` with one trainable scalar per layer.
#[derive(Clone, Debug)]
pub struct LinearCombination {
    /// Shape `[layers]`, initialized to zero (uniform weights).
    pub weights: ParamId,
    layers: usize,
}

impl LinearCombination {
    pub fn new<T: Float>(layers: usize, store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Structure("linear combination needs at least one layer".into()));
        }
        let weights = store.add(format!("{name}.weights"), Tensor::zeros(&[layers]))?;
        Ok(LinearCombination { weights, layers })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn aggregate<T: Float>(&self, fw: &Forward<'_, T>, outputs: &[Var]) -> Result<Var> {
        check_count("linear combination", self.layers, outputs.len())?;
        let tape = fw.tape;
        let w = tape.softmax_last_dim(fw.param(self.weights), None)?;
        let mut acc: Option<Var> = None;
        for (l, h) in outputs.iter().enumerate() {
            let wl = tape.narrow(w, 0, l, 1)?;
            let term = tape.scale_by(*h, wl)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one layer"))
    }
}

/// Left fold `y_1 = h_1`, `y_l = AGG_l(h_l, y_{l-1})`.
#[derive(Clone, Debug)]
pub struct IterativeCombination {
    /// `nodes[l - 1]` fuses layer `l` (zero-based) into the running value.
    pub nodes: Vec<AggFormula>,
}

impl IterativeCombination {
    pub fn new<T: Float>(
        layers: usize,
        dims: FormulaDims,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Structure("iterative combination needs at least one layer".into()));
        }
        let nodes = (1..layers)
            .map(|l| AggFormula::new(dims, store, init, &format!("{name}.step{l}")))
            .collect::<Result<_>>()?;
        Ok(IterativeCombination { nodes })
    }

    pub fn layers(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn aggregate<T: Float>(&self, fw: &Forward<'_, T>, outputs: &[Var]) -> Result<Var> {
        check_count("iterative combination", self.layers(), outputs.len())?;
        let mut y = outputs[0];
        for (node, h) in self.nodes.iter().zip(&outputs[1..]) {
            y = node.apply(fw, *h, y)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{AggTree, Aggregator, FormulaKind, Structure};
    use crate::tensor::Tape;

    fn dims(kind: FormulaKind) -> FormulaDims {
        FormulaDims {
            kind,
            d_model: 2,
            inner_dim: 2,
            dropout: 0.0,
            eps: 1e-6,
        }
    }

    fn run(store: &ParamStore<f64>, agg: &Aggregator, leaves: &[Tensor<f64>]) -> Tensor<f64> {
        let tape = Tape::new();
        let fw = Forward::eval(&tape, store);
        let vars: Vec<_> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
        let out = agg.aggregate(&fw, &vars).unwrap();
        let v = tape.value(out).clone();
        v
    }

    fn leaves(n: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|l| Tensor::from_f64(&[2], &[l as f64 + 1.0, -(l as f64) * 2.0]).unwrap())
            .collect()
    }

    #[test]
    fn linear_combination_uniform_then_peaked() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let agg = Aggregator::build(Structure::LinearCombination, 3, dims(FormulaKind::Mean), &mut store, &mut init, "lc")
            .unwrap()
            .unwrap();
        let hs = leaves(3);
        let out = run(&store, &agg, &hs);
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
        assert!((out.data()[1] + 2.0).abs() < 1e-12);

        let Aggregator::Linear(lc) = &agg else { unreachable!() };
        *store.value_mut(lc.weights) = Tensor::from_f64(&[3], &[-20., 20., -20.]).unwrap();
        let out = run(&store, &agg, &hs);
        assert!(out.max_abs_diff(&hs[1]) < 1e-6);
    }

    #[test]
    fn iterative_single_layer_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let agg = Aggregator::build(
            Structure::IterativeCombination,
            1,
            dims(FormulaKind::ConcatFfn),
            &mut store,
            &mut init,
            "it",
        )
        .unwrap()
        .unwrap();
        assert!(store.is_empty());
        let hs = leaves(1);
        assert_eq!(run(&store, &agg, &hs), hs[0]);
    }

    #[test]
    fn iterative_mean_fold() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let agg = Aggregator::build(Structure::IterativeCombination, 3, dims(FormulaKind::Mean), &mut store, &mut init, "it")
            .unwrap()
            .unwrap();
        let hs = leaves(3);
        // y2 = (h2 + h1)/2, y3 = (h3 + y2)/2
        let y2: Vec<f64> = (0..2).map(|i| 0.5 * (hs[1].data()[i] + hs[0].data()[i])).collect();
        let y3: Vec<f64> = (0..2).map(|i| 0.5 * (hs[2].data()[i] + y2[i])).collect();
        assert_eq!(run(&store, &agg, &hs).data(), &y3[..]);
    }

    #[test]
    fn cnn_tree_has_no_residuals() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let agg = Aggregator::build(Structure::CnnLikeTree, 4, dims(FormulaKind::Mean), &mut store, &mut init, "cnn")
            .unwrap()
            .unwrap();
        let unit = |i: usize| Tensor::from_fn(&[4], |j| if i == j { 1.0 } else { 0.0 });
        let hs: Vec<_> = (0..4).map(unit).collect();
        assert_eq!(run(&store, &agg, &hs).data(), &[0.25; 4]);
        assert_eq!(run(&store, &agg, &vec![Tensor::zeros(&[4]); 4]).data(), &[0.0; 4]);
        assert!(matches!(
            AggTree::new(3, false, dims(FormulaKind::Mean), &mut store, &mut init, "bad"),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn linear_combination_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(0);
        let agg = Aggregator::build(Structure::LinearCombination, 3, dims(FormulaKind::Mean), &mut store, &mut init, "lc")
            .unwrap()
            .unwrap();
        let Aggregator::Linear(lc) = &agg else { unreachable!() };
        *store.value_mut(lc.weights) = Tensor::from_f64(&[3], &[0.3, -0.2, 0.5]).unwrap();
        let hs = leaves(3);
        let report = crate::tensor::grad_check_params(
            &mut store,
            |tape, params| {
                let vars: Vec<_> = hs.iter().map(|l| tape.constant(l.clone())).collect();
                agg.aggregate(&Forward::eval(tape, params), &vars)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
