//! Forward definitions of the differentiable kernels.

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{permute_runs, smoothed_target, softmax_row, Op};
use super::{Float, Mask, Tape, Tensor, Var};

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Float> Tape<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two dimensions.
    ///
    /// `a` is `[.., m, k]`. `b` is either a `[k, n]` matrix shared by every
    /// leading index of `a`, or `[.., k, n]` with the same leading dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let (av, bv) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::shape("matmul", format!("operands must have rank >= 2, got {sa:?} and {sb:?}")));
            }
            let k = sa[sa.len() - 1];
            let m = sa[sa.len() - 2];
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != kb {
                return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let mut c = vec![T::zero(); shape.iter().product()];
            if sb.len() == 2 {
                let rows = av.numel() / k;
                T::gemm(rows, k, n, T::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), T::zero(), &mut c, (n as isize, 1));
            } else {
                if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return Err(Error::shape("matmul", format!("batch dimensions differ: {sa:?} x {sb:?}")));
                }
                let batches = av.numel() / (m * k);
                for bi in 0..batches {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av.data()[bi * m * k..],
                        (k as isize, 1),
                        &bv.data()[bi * k * n..],
                        (n as isize, 1),
                        T::zero(),
                        &mut c[bi * m * n..],
                        (n as isize, 1),
                    );
                }
            }
            Tensor::new(shape, c)?
        };
        self.push("matmul", out, self.rg(&[a, b]), || Op::MatMul { a: a.0, b: b.0 })
    }

    fn broadcast_binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let inner = self.inner.borrow();
        let (av, bv) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
        let (big, small, swapped) = if is_suffix(bv.shape(), av.shape()) {
            (av, bv, false)
        } else if is_suffix(av.shape(), bv.shape()) {
            (bv, av, true)
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} and {:?} do not broadcast over leading dims", av.shape(), bv.shape()),
            ));
        };
        let ns = small.numel();
        let mut data = Vec::with_capacity(big.numel());
        for chunk in big.data().chunks_exact(ns.max(1)) {
            if swapped {
                data.extend(chunk.iter().zip(small.data()).map(|(&x, &y)| f(y, x)));
            } else {
                data.extend(chunk.iter().zip(small.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(big.shape().to_vec(), data)
    }

    /// Elementwise sum. One operand may be broadcast over the other's
    /// leading dimensions (its shape must be a suffix of the other's).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, self.rg(&[a, b]), || Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, self.rg(&[a, b]), || Op::Mul { a: a.0, b: b.0 })
    }

    /// Multiplies by a constant.
    pub fn scale(&self, a: Var, factor: T) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())?
        };
        self.push("scale", out, self.rg(&[a]), || Op::Scale { a: a.0, factor })
    }

    /// Multiplies by a single-element tensor that may itself be trainable.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let sv = &inner.nodes[s.0].value;
            if sv.numel() != 1 {
                return Err(Error::shape("scale_by", format!("scale must have one element, got {:?}", sv.shape())));
            }
            let k = sv.item();
            let av = &inner.nodes[a.0].value;
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * k).collect())?
        };
        self.push("scale_by", out, self.rg(&[a, s]), || Op::ScaleBy { a: a.0, s: s.0 })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.max(T::zero())).collect())?
        };
        self.push("relu", out, self.rg(&[a]), || Op::Relu { a: a.0 })
    }

    pub fn concat_last_dim(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let (av, bv) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::shape("concat_last_dim", format!("{sa:?} and {sb:?} disagree outside the last dim")));
            }
            let (da, db) = (av.last_dim(), bv.last_dim());
            let rows = av.numel() / da;
            let mut data = Vec::with_capacity(av.numel() + bv.numel());
            for r in 0..rows {
                data.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
                data.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = da + db;
            Tensor::new(shape, data)?
        };
        self.push("concat_last_dim", out, self.rg(&[a, b]), || Op::Concat { a: a.0, b: b.0 })
    }

    /// Gathers rows of a `[vocab, d]` table. The output shape is
    /// `ids_shape + [d]`.
    pub fn embedding(&self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding_lookup", format!("{} ids for shape {ids_shape:?}", ids.len())));
        }
        let out = {
            let tv = self.value(table);
            if tv.rank() != 2 {
                return Err(Error::shape("embedding_lookup", "table must be a matrix"));
            }
            let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Index { op: "embedding_lookup", id, extent: vocab });
                }
                data.extend_from_slice(tv.row(id));
            }
            let mut shape = ids_shape.to_vec();
            shape.push(d);
            Tensor::new(shape, data)?
        };
        self.push("embedding_lookup", out, self.rg(&[table]), || Op::Embedding { table: table.0, ids: ids.to_vec() })
    }

    pub fn transpose_last_two(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let s = v.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose_last_two", format!("rank {} < 2", s.len())));
            }
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let mut data = vec![T::zero(); v.numel()];
            for bi in 0..v.numel() / (m * n) {
                let off = bi * m * n;
                for i in 0..m {
                    for j in 0..n {
                        data[off + j * m + i] = v.data()[off + i * n + j];
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, data)?
        };
        self.push("transpose_last_two", out, self.rg(&[a]), || Op::TransposeLastTwo { a: a.0 })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, self.rg(&[a]), || Op::Reshape { a: a.0 })
    }

    /// Reorders dimensions: output dim `d` is input dim `perm[d]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let s = v.shape();
            let mut seen = vec![false; s.len()];
            if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", s.len())));
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
            let mut data = Vec::with_capacity(v.numel());
            permute_runs(s, perm, |_, src, run| data.extend_from_slice(&v.data()[src..src + run]));
            Tensor::new(out_shape, data)?
        };
        self.push("permute", out, self.rg(&[a]), || Op::Permute { a: a.0, perm: perm.to_vec() })
    }

    /// Softmax over the last dimension. Masked positions are exactly zero;
    /// a row with no visible position is an error.
    pub fn softmax_last_dim(&self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let d = v.last_dim();
            let visible = mask.map(|m| m.expand(v.shape())).transpose()?;
            let mut data = vec![T::zero(); v.numel()];
            let mut buf = Vec::with_capacity(d);
            for r in 0..v.numel() / d {
                let row = v.row(r);
                let out = &mut data[r * d..(r + 1) * d];
                match &visible {
                    None => softmax_row(row, out),
                    Some(vis) => {
                        let vis = &vis[r * d..(r + 1) * d];
                        buf.clear();
                        buf.extend(row.iter().zip(vis).filter(|(_, &m)| m).map(|(&x, _)| x));
                        if buf.is_empty() {
                            return Err(Error::MaskedRow { row: r });
                        }
                        let max = buf.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for j in 0..d {
                            if vis[j] {
                                out[j] = (row[j] - max).exp();
                                sum += out[j];
                            }
                        }
                        for o in out.iter_mut() {
                            *o /= sum;
                        }
                    }
                }
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.push("softmax_last_dim", out, self.rg(&[a]), || Op::Softmax { a: a.0 })
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let (gv, bv) = (&inner.nodes[gamma.0].value, &inner.nodes[beta.0].value);
            let d = xv.last_dim();
            if gv.numel() != d || bv.numel() != d {
                return Err(Error::shape("layer_norm", format!("gain/shift extents {:?}/{:?} vs feature dim {d}", gv.shape(), bv.shape())));
            }
            let dn = T::from_usize(d);
            let mut data = Vec::with_capacity(xv.numel());
            for r in 0..xv.numel() / d {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rstd = T::one() / (var + eps).sqrt();
                data.extend(row.iter().enumerate().map(|(j, &v)| gv.data()[j] * (v - mean) * rstd + bv.data()[j]));
            }
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.push("layer_norm", out, self.rg(&[x, gamma, beta]), || Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push("sum_all", out, self.rg(&[a]), || Op::SumAll { a: a.0 })
    }

    /// Slice `start..start + len` along `dim`.
    pub fn narrow(&self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let s = v.shape();
            if dim >= s.len() || len == 0 || start + len > s[dim] {
                return Err(Error::shape("narrow", format!("range {start}..{} on dim {dim} of {s:?}", start + len)));
            }
            let outer: usize = s[..dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[dim] + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[dim] = len;
            Tensor::new(shape, data)?
        };
        self.push("narrow", out, self.rg(&[a]), || Op::Narrow { a: a.0, dim, start })
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. `rate == 0` returns `a`.
    pub fn dropout(&self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let survive = T::from_f64(1.0 / (1.0 - rate));
        let (out, keep) = {
            let v = self.value(a);
            let keep: Vec<T> = (0..v.numel()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { survive }).collect();
            let data = v.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
            (Tensor::new(v.shape().to_vec(), data)?, keep)
        };
        self.push("dropout", out, self.rg(&[a]), move || Op::Dropout { a: a.0, keep })
    }

    /// Label-smoothed cross-entropy, returned as the mean over non-pad
    /// positions of `KL(q || softmax(logits))`, where `q` puts `1 - eps` on
    /// the gold class and `eps / (V - 1)` on every other class.
    pub fn label_smoothed_ce(&self, logits: Var, targets: &[usize], eps: f64, pad: usize) -> Result<Var> {
        let eps_t = T::from_f64(eps);
        let (out, count) = {
            let lv = self.value(logits);
            let v = lv.last_dim();
            if lv.numel() / v != targets.len() {
                return Err(Error::shape("label_smoothed_ce", format!("{} targets for logits {:?}", targets.len(), lv.shape())));
            }
            let mut total = 0.0f64;
            let mut count = 0usize;
            let mut p = vec![T::zero(); v];
            for (r, &gold) in targets.iter().enumerate() {
                if gold == pad {
                    continue;
                }
                if gold >= v {
                    return Err(Error::Index { op: "label_smoothed_ce", id: gold, extent: v });
                }
                count += 1;
                let row = lv.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max.as_f64() + row.iter().map(|&x| (x - max).as_f64().exp()).sum::<f64>().ln();
                softmax_row(row, &mut p);
                for j in 0..v {
                    let q = smoothed_target::<T>(j, gold, eps_t, v).as_f64();
                    if q > 0.0 {
                        total += q * (q.ln() - (row[j].as_f64() - lse));
                    }
                }
            }
            if count == 0 {
                return Err(Error::Invalid("label_smoothed_ce: every target position is padding".into()));
            }
            (Tensor::scalar(T::from_f64(total / count as f64)), count)
        };
        self.push("label_smoothed_ce", out, self.rg(&[logits]), || Op::SmoothedCe {
            logits: logits.0,
            targets: targets.to_vec(),
            eps: eps_t,
            pad,
            count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    }

    #[test]
    fn concat_vectors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[1], &[3.]));
        let c = tape.concat_last_dim(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
        let bad = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(tape.concat_last_dim(a, bad).is_err());
    }

    #[test]
    fn embedding_out_of_range() {
        let tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embedding(table, &[1, 4], &[2]), Err(Error::Index { id: 4, .. })));
    }

    #[test]
    fn add_broadcasts_leading_dims_only() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2], &[10., 20.]));
        assert_eq!(tape.value(tape.add(a, b).unwrap()).data(), &[11., 22., 13., 24.]);
        let col = tape.constant(t(&[2, 1], &[1., 1.]));
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax_last_dim(x, None).unwrap();
        for &v in tape.value(y).data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = tape.constant(t(&[2], &[5., 7.]));
        let m = Mask::new(vec![2], vec![true, false]).unwrap();
        let y = tape.softmax_last_dim(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // e^x / sum e^x for x = [1, 2, 3]
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax_last_dim(x, None).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let m = Mask::new(vec![2, 2], vec![true, true, false, false]).unwrap();
        assert!(matches!(tape.softmax_last_dim(x, Some(&m)), Err(Error::MaskedRow { row: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let gamma = tape.constant(Tensor::ones(&[4]));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let zero = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(zero, gamma, beta, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let flat = tape.constant(Tensor::ones(&[4]));
        let g2 = tape.constant(t(&[4], &[3., -2., 5., 7.]));
        let y = tape.layer_norm(flat, g2, beta, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        // mean 2.5, var 1.25: (x - 2.5) / sqrt(1.25 + 1e-5)
        let x = tape.constant(t(&[4], &[1., 2., 3., 4.]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let s = (1.25f64 + 1e-5).sqrt();
        let expected = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
        assert!(Tape::<f64>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1., -1.]));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum_all(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::ones(&[5]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn smoothed_ce_reference_values() {
        let tape = Tape::<f64>::new();
        // eps 0 and a saturated gold logit: loss 0
        let logits = tape.constant(t(&[1, 1, 3], &[0., 800., 0.]));
        let l = tape.label_smoothed_ce(logits, &[1], 0.0, 99).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        // uniform logits, eps 0: ln V
        let logits = tape.constant(Tensor::zeros(&[1, 2, 5]));
        let l = tape.label_smoothed_ce(logits, &[3, 4], 0.0, 0).unwrap();
        assert_relative_eq!(tape.value(l).item(), 5f64.ln(), max_relative = 1e-12);
        // all padding
        assert!(tape.label_smoothed_ce(logits, &[0, 0], 0.1, 0).is_err());
    }

    #[test]
    fn smoothed_ce_hand_evaluation() {
        // vocab 4, eps 0.1, gold class 2, logits [1, 2, 3, 0].
        // q = [1/30, 1/30, 0.9, 1/30]
        // log p = logits - ln(e + e^2 + e^3 + 1) = logits - 3.4401896985611953
        // KL = sum q ln q - sum q log p
        let lse = 3.4401896985611953f64;
        let q: [f64; 4] = [1.0 / 30.0, 1.0 / 30.0, 0.9, 1.0 / 30.0];
        let z = [1.0, 2.0, 3.0, 0.0];
        let expected: f64 = q.iter().zip(z).map(|(&q, z)| q * (q.ln() - (z - lse))).sum();
        let tape = Tape::<f64>::new();
        let logits = tape.constant(t(&[1, 1, 4], &z));
        let l = tape.label_smoothed_ce(logits, &[2], 0.1, 0).unwrap();
        assert_relative_eq!(tape.value(l).item(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 0.20524549630293606, max_relative = 1e-12);
    }

    #[test]
    fn narrow_and_permute_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let n = tape.narrow(x, 1, 2, 1).unwrap();
        assert_eq!(tape.shape(n), vec![2, 1, 4]);
        assert_eq!(tape.value(n).data(), &[8., 9., 10., 11., 20., 21., 22., 23.]);
        let p = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(p), vec![3, 2, 4]);
        assert_eq!(&tape.value(p).data()[4..8], &[12., 13., 14., 15.]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }
}
