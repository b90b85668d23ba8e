use crate::error::{Error, Result};

use super::strides;

/// Boolean visibility mask for [`Tape::softmax_last_dim`](super::Tape::softmax_last_dim).
///
/// `true` marks a visible position. A mask broadcasts against a tensor of
/// equal rank wherever its extent is 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "mask",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Mask { shape, data })
    }

    pub fn from_fn(shape: &[usize], f: impl Fn(&[usize]) -> bool) -> Self {
        let numel: usize = shape.iter().product();
        let st = strides(shape);
        let mut idx = vec![0; shape.len()];
        let data = (0..numel)
            .map(|flat| {
                let mut rem = flat;
                for (i, s) in st.iter().enumerate() {
                    idx[i] = rem / s;
                    rem %= s;
                }
                f(&idx)
            })
            .collect();
        Mask {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Lower-triangular `[1, 1, len, len]` mask: query `t` sees keys `<= t`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(&[1, 1, len, len], |i| i[3] <= i[2])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Elementwise AND of two masks of equal rank, broadcasting extents of 1.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::shape("mask_and", "rank mismatch"));
        }
        let mut shape = Vec::with_capacity(self.shape.len());
        for (&a, &b) in self.shape.iter().zip(&other.shape) {
            if a != b && a != 1 && b != 1 {
                return Err(Error::shape(
                    "mask_and",
                    format!("{:?} vs {:?}", self.shape, other.shape),
                ));
            }
            shape.push(a.max(b));
        }
        let lhs = self.expand(&shape)?;
        let rhs = other.expand(&shape)?;
        Ok(Mask {
            shape,
            data: lhs.iter().zip(&rhs).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// Materializes the mask at `target` shape.
    pub fn expand(&self, target: &[usize]) -> Result<Vec<bool>> {
        if self.shape.len() != target.len()
            || self
                .shape
                .iter()
                .zip(target)
                .any(|(&m, &t)| m != t && m != 1)
        {
            return Err(Error::shape(
                "mask",
                format!("mask {:?} does not broadcast to {target:?}", self.shape),
            ));
        }
        let own = strides(&self.shape);
        let steps: Vec<usize> = own
            .iter()
            .zip(&self.shape)
            .map(|(&s, &m)| if m == 1 { 0 } else { s })
            .collect();
        let numel: usize = target.iter().product();
        let mut out = Vec::with_capacity(numel);
        let mut idx = vec![0usize; target.len()];
        let mut src = 0usize;
        for _ in 0..numel {
            out.push(self.data[src]);
            for d in (0..target.len()).rev() {
                idx[d] += 1;
                src += steps[d];
                if idx[d] < target[d] {
                    break;
                }
                src -= steps[d] * target[d];
                idx[d] = 0;
            }
        }
        Ok(out)
    }
}
