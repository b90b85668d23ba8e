//! Cross-layer aggregation.
//!
//! An aggregation formula fuses two same-shaped layer representations into
//! one. Structures decide which pairs get fused:
//!
//! - [`AggTree`] with residuals is RTAL: a balanced binary tree evaluated in
//!   post-order, where every internal node except the root adds the value of
//!   its right (deeper-layer) child to its formula output.
//! - The same tree without residuals is the CNN-like tree baseline.
//! - [`LinearCombination`] and [`IterativeCombination`] are the remaining
//!   baselines.

mod baseline;
mod formula;
mod tree;

pub use baseline::{IterativeCombination, LinearCombination};
pub use formula::{agg_concat_ffn, agg_ewp_ffn, agg_mean, AggFormula};
pub use tree::{AggTree, Child, TreeNode};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Forward;
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Var};

/// Binary fusion rule applied at every aggregation node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaKind {
    /// `0.5 * (a + b)`, parameter-free.
    Mean,
    /// `FFN(concat(a, b))` mapping `2d -> d`.
    ConcatFfn,
    /// `sumb = beta * (a + b)`, `FFN(LN(sumb)) + sumb`.
    EwpFfn,
}

impl FormulaKind {
    pub const ALL: [FormulaKind; 3] = [FormulaKind::Mean, FormulaKind::ConcatFfn, FormulaKind::EwpFfn];

    pub fn as_str(self) -> &'static str {
        match self {
            FormulaKind::Mean => "mean",
            FormulaKind::ConcatFfn => "concat_ffn",
            FormulaKind::EwpFfn => "ewp_ffn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Plain Transformer: only the top layer is used downstream.
    None,
    Rtal,
    LinearCombination,
    IterativeCombination,
    CnnLikeTree,
}

impl Structure {
    pub const ALL: [Structure; 5] = [
        Structure::None,
        Structure::Rtal,
        Structure::LinearCombination,
        Structure::IterativeCombination,
        Structure::CnnLikeTree,
    ];

    /// Tree structures need a power-of-two span of layers.
    pub fn is_tree(self) -> bool {
        matches!(self, Structure::Rtal | Structure::CnnLikeTree)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::None => "none",
            Structure::Rtal => "rtal",
            Structure::LinearCombination => "linear_combination",
            Structure::IterativeCombination => "iterative_combination",
            Structure::CnnLikeTree => "cnn_like_tree",
        }
    }
}

/// Hyperparameters shared by every formula node of one aggregator.
#[derive(Clone, Copy, Debug)]
pub struct FormulaDims {
    pub kind: FormulaKind,
    pub d_model: usize,
    pub inner_dim: usize,
    pub dropout: f64,
    pub eps: f64,
}

/// A built aggregator for one stack (encoder or decoder).
#[derive(Clone, Debug)]
pub enum Aggregator {
    /// RTAL and the CNN-like tree (residual flags differ).
    Tree(AggTree),
    Linear(LinearCombination),
    Iterative(IterativeCombination),
}

impl Aggregator {
    /// Builds the aggregator for `structure` over `layers` layer outputs.
    /// Returns `None` for [`Structure::None`].
    pub fn build<T: Float>(
        structure: Structure,
        layers: usize,
        dims: FormulaDims,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
    ) -> Result<Option<Self>> {
        Ok(match structure {
            Structure::None => None,
            Structure::Rtal => Some(Aggregator::Tree(AggTree::new(layers, true, dims, store, init, name)?)),
            Structure::CnnLikeTree => Some(Aggregator::Tree(AggTree::new(layers, false, dims, store, init, name)?)),
            Structure::LinearCombination => Some(Aggregator::Linear(LinearCombination::new(layers, store, name)?)),
            Structure::IterativeCombination => Some(Aggregator::Iterative(IterativeCombination::new(
                layers, dims, store, init, name,
            )?)),
        })
    }

    /// Trainable scalars added by an aggregator, without building it.
    pub fn num_params(structure: Structure, layers: usize, kind: FormulaKind, d_model: usize, inner_dim: usize) -> usize {
        let per_node = AggFormula::num_params(kind, d_model, inner_dim);
        match structure {
            Structure::None => 0,
            Structure::Rtal | Structure::CnnLikeTree => layers.saturating_sub(1) * per_node,
            Structure::IterativeCombination => layers.saturating_sub(1) * per_node,
            Structure::LinearCombination => layers,
        }
    }

    /// Number of layer outputs consumed.
    pub fn span(&self) -> usize {
        match self {
            Aggregator::Tree(t) => t.leaves(),
            Aggregator::Linear(l) => l.layers(),
            Aggregator::Iterative(i) => i.layers(),
        }
    }

    pub fn aggregate<T: Float>(&self, fw: &Forward<'_, T>, outputs: &[Var]) -> Result<Var> {
        match self {
            Aggregator::Tree(t) => t.aggregate(fw, outputs),
            Aggregator::Linear(l) => l.aggregate(fw, outputs),
            Aggregator::Iterative(i) => i.aggregate(fw, outputs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counted_params_match_built_params() {
        for structure in Structure::ALL {
            for kind in FormulaKind::ALL {
                for layers in [2usize, 4, 8] {
                    let mut store = ParamStore::<f32>::new();
                    let mut init = Initializer::new(0);
                    let dims = FormulaDims {
                        kind,
                        d_model: 6,
                        inner_dim: 5,
                        dropout: 0.0,
                        eps: 1e-6,
                    };
                    Aggregator::build(structure, layers, dims, &mut store, &mut init, "agg").unwrap();
                    assert_eq!(
                        store.num_scalars(),
                        Aggregator::num_params(structure, layers, kind, 6, 5),
                        "{structure:?} {kind:?} {layers}"
                    );
                }
            }
        }
    }
}
