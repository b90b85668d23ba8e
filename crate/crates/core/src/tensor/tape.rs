use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::{strides, Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<T>>,
}

/// Backward rule of a recorded operation. Input indices always precede the
/// node that owns the op.
pub(crate) enum Op<T> {
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    ScaleBy { a: usize, s: usize },
    Relu { a: usize },
    Concat { a: usize, b: usize },
    Embedding { table: usize, ids: Vec<usize> },
    TransposeLastTwo { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
    SumAll { a: usize },
    Narrow { a: usize, dim: usize, start: usize },
    Dropout { a: usize, keep: Vec<T> },
    SmoothedCe { logits: usize, targets: Vec<usize>, eps: T, pad: usize, count: usize },
}

pub(crate) struct Inner<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only. Nodes reference earlier nodes
/// only, so the recording order is already topological.
pub struct Tape<T: Float> {
    pub(crate) inner: RefCell<Inner<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                grads: Vec::new(),
            }),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters never require gradients; nothing but
    /// forward values is recorded.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that participates in differentiation.
    pub fn var(&self, value: Tensor<T>) -> Var {
        self.leaf(value, self.grad_enabled)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Places parameter `id` on the tape. Repeated calls return the same
    /// handle, so gradients from shared uses accumulate in one place.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.inner.borrow().params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), self.grad_enabled);
        self.inner.borrow_mut().params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &self,
        op_name: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then(op),
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participated.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(inner.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter placed on the tape via [`Tape::param`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut ids: Vec<_> = self
            .inner
            .borrow()
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        ids.sort_by_key(|(id, _)| *id);
        ids.into_iter()
            .filter_map(|(id, v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        let n = inner.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {} elements", n),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(op) = &inner.nodes[i].op {
                backward_op(op, i, &g, &inner.nodes, &mut grads);
            }
            grads[i] = Some(g);
        }
        inner.grads = grads;
        Ok(())
    }
}

fn acc<'a, T: Float>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    idx: usize,
) -> Option<&'a mut [T]> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let n = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_op<T: Float>(
    op: &Op<T>,
    out: usize,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    match *op {
        Op::MatMul { a, b } => {
            let av = val(a);
            let bv = val(b);
            let k = av.last_dim();
            let n = bv.last_dim();
            if bv.rank() == 2 {
                let m = av.numel() / k;
                // dA = G B^T
                if let Some(ga) = acc(grads, nodes, a) {
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv.data(), (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                // dB = A^T G
                if let Some(gb) = acc(grads, nodes, b) {
                    T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            } else {
                let m = av.shape()[av.rank() - 2];
                let batches = av.numel() / (m * k);
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if let Some(ga) = acc(grads, nodes, a) {
                    for bi in 0..batches {
                        T::gemm(m, n, k, T::one(), &g[bi * sg..], (n as isize, 1), &bv.data()[bi * sb..], (1, n as isize), T::one(), &mut ga[bi * sa..], (k as isize, 1));
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for bi in 0..batches {
                        T::gemm(k, m, n, T::one(), &av.data()[bi * sa..], (1, k as isize), &g[bi * sg..], (n as isize, 1), T::one(), &mut gb[bi * sb..], (n as isize, 1));
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for x in [a, b] {
                if let Some(gx) = acc(grads, nodes, x) {
                    let nx = gx.len();
                    for gc in g.chunks_exact(nx) {
                        for (x, &gi) in gx.iter_mut().zip(gc) {
                            *x += gi;
                        }
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            for (x, y) in [(a, b), (b, a)] {
                let yv = val(y).data();
                if let Some(gx) = acc(grads, nodes, x) {
                    let (nx, ny) = (gx.len(), yv.len());
                    if nx == g.len() {
                        for (xc, gc) in gx.chunks_exact_mut(ny).zip(g.chunks_exact(ny)) {
                            for ((x, &gi), &yi) in xc.iter_mut().zip(gc).zip(yv) {
                                *x += gi * yi;
                            }
                        }
                    } else {
                        for (gc, yc) in g.chunks_exact(nx).zip(yv.chunks_exact(nx)) {
                            for ((x, &gi), &yi) in gx.iter_mut().zip(gc).zip(yc) {
                                *x += gi * yi;
                            }
                        }
                    }
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * factor;
                }
            }
        }
        Op::ScaleBy { a, s } => {
            let sv = val(s).item();
            let av = val(a).data();
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * sv;
                }
            }
            if let Some(gs) = acc(grads, nodes, s) {
                let dot: T = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).sum();
                gs[0] += dot;
            }
        }
        Op::Relu { a } => {
            let av = val(a).data();
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(av) {
                    if ai > T::zero() {
                        *x += gi;
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let da = val(a).last_dim();
            let db = val(b).last_dim();
            let rows = val(a).numel() / da;
            if let Some(ga) = acc(grads, nodes, a) {
                for r in 0..rows {
                    for j in 0..da {
                        ga[r * da + j] += g[r * (da + db) + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for r in 0..rows {
                    for j in 0..db {
                        gb[r * db + j] += g[r * (da + db) + da + j];
                    }
                }
            }
        }
        Op::Embedding { table, ref ids } => {
            let d = val(table).last_dim();
            if let Some(gt) = acc(grads, nodes, table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::TransposeLastTwo { a } => {
            let shape = val(a).shape();
            let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            if let Some(ga) = acc(grads, nodes, a) {
                let batches = ga.len() / (m * n);
                for bi in 0..batches {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            // out[j][i] = a[i][j]
                            ga[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        Op::Permute { a, ref perm } => {
            let in_shape = val(a).shape().to_vec();
            if let Some(ga) = acc(grads, nodes, a) {
                permute_runs(&in_shape, perm, |dst, src, run| {
                    for (x, &gi) in ga[src..src + run].iter_mut().zip(&g[dst..dst + run]) {
                        *x += gi;
                    }
                });
            }
        }
        Op::Softmax { a } => {
            let y = val(out);
            let d = y.last_dim();
            if let Some(ga) = acc(grads, nodes, a) {
                for (r, yr) in y.data().chunks(d).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..d {
                        ga[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = val(x);
            let gam = val(gamma).data();
            let d = xv.last_dim();
            let dn = T::from_usize(d);
            let rows = xv.numel() / d;
            let mut gx_buf = vec![T::zero(); if nodes[x].requires_grad { xv.numel() } else { 0 }];
            let mut ggam = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            for r in 0..rows {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    ggam[j] += gr[j] * xhat[j];
                    gbeta[j] += gr[j];
                }
                if !gx_buf.is_empty() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_xhat = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat[j];
                    }
                    mean_dh /= dn;
                    mean_dh_xhat /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx_buf[r * d + j] = rstd * (dh - mean_dh - xhat[j] * mean_dh_xhat);
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, x) {
                for (a, b) in gx.iter_mut().zip(&gx_buf) {
                    *a += *b;
                }
            }
            if let Some(gg) = acc(grads, nodes, gamma) {
                for (a, b) in gg.iter_mut().zip(&ggam) {
                    *a += *b;
                }
            }
            if let Some(gb) = acc(grads, nodes, beta) {
                for (a, b) in gb.iter_mut().zip(&gbeta) {
                    *a += *b;
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = acc(grads, nodes, a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Narrow { a, dim, start } => {
            let in_shape = val(a).shape().to_vec();
            let out_shape = val(out).shape().to_vec();
            if let Some(ga) = acc(grads, nodes, a) {
                let outer: usize = in_shape[..dim].iter().product();
                let inner: usize = in_shape[dim + 1..].iter().product();
                let (len_in, len_out) = (in_shape[dim], out_shape[dim]);
                for o in 0..outer {
                    for t in 0..len_out {
                        let src = (o * len_out + t) * inner;
                        let dst = (o * len_in + start + t) * inner;
                        for j in 0..inner {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
            }
        }
        Op::Dropout { a, ref keep } => {
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, &gi), &k) in ga.iter_mut().zip(g).zip(keep) {
                    *x += gi * k;
                }
            }
        }
        Op::SmoothedCe { logits, ref targets, eps, pad, count } => {
            let lv = val(logits);
            let v = lv.last_dim();
            let scale = g[0] / T::from_usize(count);
            if let Some(gl) = acc(grads, nodes, logits) {
                let mut p = vec![T::zero(); v];
                for (r, &tgt) in targets.iter().enumerate() {
                    if tgt == pad {
                        continue;
                    }
                    softmax_row(lv.row(r), &mut p);
                    for j in 0..v {
                        let q = smoothed_target(j, tgt, eps, v);
                        gl[r * v + j] += (p[j] - q) * scale;
                    }
                }
            }
        }
    }
}

/// Walks a permutation of a row-major tensor of `in_shape` as contiguous
/// runs, calling `f(out_offset, in_offset, run_len)`.
pub(crate) fn permute_runs(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let steps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    // the last axis stays innermost: copy whole rows at once
    let outer = if rank > 0 && perm[rank - 1] == rank - 1 { rank - 1 } else { rank };
    let run: usize = out_shape[outer..].iter().product();
    let mut idx = vec![0usize; outer];
    let mut src = 0usize;
    let mut dst = 0usize;
    while dst < numel {
        f(dst, src, run);
        dst += run;
        for d in (0..outer).rev() {
            idx[d] += 1;
            src += steps[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= steps[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn softmax_row<T: Float>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = (xi - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Target probability of class `j` when the gold class is `gold`:
/// `1 - eps` on gold, `eps / (V - 1)` elsewhere.
pub(crate) fn smoothed_target<T: Float>(j: usize, gold: usize, eps: T, vocab: usize) -> T {
    if j == gold {
        T::one() - eps
    } else if vocab > 1 {
        eps / T::from_usize(vocab - 1)
    } else {
        T::zero()
    }
}
