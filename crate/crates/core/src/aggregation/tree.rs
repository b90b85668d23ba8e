use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Var};

use super::{AggFormula, FormulaDims};

/// Reference to a tree input: a leaf (layer slot) or an earlier internal node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Child {
    Leaf(usize),
    Node(usize),
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub left: Child,
    /// Covers deeper layers than `left`; its value is the residual.
    pub right: Child,
    pub residual: bool,
    pub formula: AggFormula,
}

/// Balanced binary aggregation tree. Internal nodes are stored in post-order,
/// so the root is last and every child precedes its parent.
#[derive(Clone, Debug)]
pub struct AggTree {
    leaves: usize,
    nodes: Vec<TreeNode>,
}

fn check_leaves(leaves: usize) -> Result<()> {
    if leaves < 2 || !leaves.is_power_of_two() {
        return Err(Error::Structure(format!(
            "tree aggregation requires a power-of-two layer count >= 2, got {leaves}"
        )));
    }
    Ok(())
}

impl AggTree {
    /// Post-order `(left, right)` pairs of a balanced tree over `leaves` slots.
    pub fn layout(leaves: usize) -> Result<Vec<(Child, Child)>> {
        check_leaves(leaves)?;
        fn build(lo: usize, hi: usize, out: &mut Vec<(Child, Child)>) -> Child {
            if hi - lo == 1 {
                return Child::Leaf(lo);
            }
            let mid = (lo + hi) / 2;
            let left = build(lo, mid, out);
            let right = build(mid, hi, out);
            out.push((left, right));
            Child::Node(out.len() - 1)
        }
        let mut out = Vec::with_capacity(leaves - 1);
        build(0, leaves, &mut out);
        Ok(out)
    }

    /// `residual = true` gives RTAL (every node but the root adds its right
    /// child); `false` gives the plain tree.
    pub fn new<T: Float>(
        leaves: usize,
        residual: bool,
        dims: FormulaDims,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
    ) -> Result<Self> {
        let layout = Self::layout(leaves)?;
        let root = layout.len() - 1;
        let mut nodes = Vec::with_capacity(layout.len());
        for (i, (left, right)) in layout.into_iter().enumerate() {
            nodes.push(TreeNode {
                left,
                right,
                residual: residual && i != root,
                formula: AggFormula::new(dims, store, init, &format!("{name}.node{i}"))?,
            });
        }
        Ok(AggTree { leaves, nodes })
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        self.nodes.last().expect("tree has at least one node")
    }

    /// Evaluates bottom-up and returns the root value.
    pub fn aggregate<T: Float>(&self, fw: &Forward<'_, T>, outputs: &[Var]) -> Result<Var> {
        if outputs.len() != self.leaves {
            return Err(Error::Structure(format!(
                "tree has {} leaves but {} layer outputs were given",
                self.leaves,
                outputs.len()
            )));
        }
        let mut values: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let get = |c: Child, values: &[Var]| match c {
            Child::Leaf(i) => outputs[i],
            Child::Node(i) => values[i],
        };
        for node in &self.nodes {
            let (l, r) = (get(node.left, &values), get(node.right, &values));
            let mut v = node.formula.apply(fw, l, r)?;
            if node.residual {
                v = fw.tape.add(v, r)?;
            }
            values.push(v);
        }
        Ok(*values.last().expect("tree has at least one node"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::FormulaKind;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(kind: FormulaKind, d: usize) -> FormulaDims {
        FormulaDims {
            kind,
            d_model: d,
            inner_dim: d,
            dropout: 0.0,
            eps: 1e-6,
        }
    }

    fn tree(leaves: usize, residual: bool, kind: FormulaKind, d: usize) -> (ParamStore<f64>, AggTree) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(leaves as u64);
        let t = AggTree::new(leaves, residual, dims(kind, d), &mut store, &mut init, "tree").unwrap();
        (store, t)
    }

    fn eval(store: &ParamStore<f64>, t: &AggTree, leaves: &[Tensor<f64>]) -> Tensor<f64> {
        let tape = Tape::new();
        let fw = Forward::eval(&tape, store);
        let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
        let root = t.aggregate(&fw, &vars).unwrap();
        let v = tape.value(root).clone();
        v
    }

    fn unit(i: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[d], |j| if j == i { 1.0 } else { 0.0 })
    }

    #[test]
    fn layout_shapes() {
        let l = AggTree::layout(4).unwrap();
        assert_eq!(
            l,
            vec![
                (Child::Leaf(0), Child::Leaf(1)),
                (Child::Leaf(2), Child::Leaf(3)),
                (Child::Node(0), Child::Node(1)),
            ]
        );
        assert_eq!(AggTree::layout(2).unwrap(), vec![(Child::Leaf(0), Child::Leaf(1))]);
        for bad in [0usize, 1, 3, 6, 12] {
            assert!(matches!(AggTree::layout(bad), Err(Error::Structure(_))), "{bad}");
        }
    }

    #[test]
    fn one_non_residual_node() {
        for leaves in [2usize, 4, 8, 16] {
            let (_, t) = tree(leaves, true, FormulaKind::Mean, 2);
            assert_eq!(t.nodes().len(), leaves - 1);
            assert_eq!(t.nodes().iter().filter(|n| !n.residual).count(), 1);
            assert!(!t.root().residual);
            let (_, t) = tree(leaves, false, FormulaKind::Mean, 2);
            assert!(t.nodes().iter().all(|n| !n.residual));
        }
    }

    #[test]
    fn four_unit_vectors_mean() {
        let (store, t) = tree(4, true, FormulaKind::Mean, 4);
        let leaves: Vec<_> = (0..4).map(|i| unit(i, 4)).collect();
        assert_eq!(eval(&store, &t, &leaves).data(), &[0.25, 0.75, 0.25, 0.75]);
    }

    #[test]
    fn two_leaves_is_plain_mean() {
        let (store, t) = tree(2, true, FormulaKind::Mean, 3);
        let a = Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap();
        let b = Tensor::from_f64(&[3], &[5., -2., 0.]).unwrap();
        assert_eq!(eval(&store, &t, &[a, b]).data(), &[3., 0., 1.5]);
    }

    #[test]
    fn zero_leaves_give_zero_root() {
        for residual in [true, false] {
            let (store, t) = tree(4, residual, FormulaKind::Mean, 3);
            let z = vec![Tensor::zeros(&[2, 3]); 4];
            assert_eq!(eval(&store, &t, &z).data(), &[0.0; 6]);
        }
        // biases start at zero, so the FFN formulas also map zeros to zeros
        let (store, t) = tree(4, false, FormulaKind::ConcatFfn, 3);
        assert_eq!(eval(&store, &t, &vec![Tensor::zeros(&[3]); 4]).data(), &[0.0; 3]);
    }

    #[test]
    fn equal_leaves_mean() {
        // with equal leaves v: level-1 nodes give 2v, and the root mean gives 2v
        let (store, t) = tree(4, true, FormulaKind::Mean, 2);
        let v = Tensor::from_f64(&[2], &[1.5, -3.0]).unwrap();
        assert_eq!(eval(&store, &t, &vec![v; 4]).data(), &[3.0, -6.0]);
    }

    #[test]
    fn leaf_count_mismatch() {
        let (store, t) = tree(4, true, FormulaKind::Mean, 2);
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let v = tape.constant(Tensor::zeros(&[2]));
        assert!(t.aggregate(&fw, &[v, v, v]).is_err());
    }

    #[test]
    fn nodes_have_independent_params() {
        let (store, t) = tree(4, true, FormulaKind::ConcatFfn, 3);
        let ids: Vec<_> = t
            .nodes()
            .iter()
            .map(|n| match &n.formula {
                AggFormula::ConcatFfn { ffn } => ffn.inner.weight,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ids.len(), 3);
        assert_ne!(store.value(ids[0]), store.value(ids[1]));
        assert_ne!(ids[0], ids[2]);
    }

    #[test]
    fn rtal_tree_gradients() {
        for kind in FormulaKind::ALL {
            let (mut store, t) = tree(4, true, kind, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let leaves: Vec<_> = (0..4)
                .map(|_| Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let err = crate::tensor::grad_check_many(
                |tape, vars| t.aggregate(&Forward::eval(tape, &store), vars),
                &leaves,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-5, "{kind:?} leaves {err}");
            if kind != FormulaKind::Mean {
                let report = crate::tensor::grad_check_params(
                    &mut store,
                    |tape, params| {
                        let vars: Vec<_> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
                        t.aggregate(&Forward::eval(tape, params), &vars)
                    },
                    1e-5,
                )
                .unwrap();
                assert!(report.max_rel_error <= 1e-5, "{kind:?} {report:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_reaches_every_leaf(
            log_leaves in 1u32..4,
            kind_idx in 0usize..3,
            residual: bool,
            seed in any::<u64>(),
        ) {
            let leaves = 1usize << log_leaves;
            let kind = FormulaKind::ALL[kind_idx];
            let (store, t) = tree(leaves, residual, kind, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let fw = Forward::eval(&tape, &store);
            let vars: Vec<_> = (0..leaves)
                .map(|_| tape.var(Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0))))
                .collect();
            let root = t.aggregate(&fw, &vars).unwrap();
            prop_assert_eq!(tape.shape(root), vec![2, 4]);
            let loss = tape.sum_all(root).unwrap();
            tape.backward(loss).unwrap();
            for (i, v) in vars.iter().enumerate() {
                let g = tape.grad(*v).unwrap();
                prop_assert!(g.data().iter().any(|x| *x != 0.0), "leaf {} has zero gradient", i);
            }
        }
    }
}
