use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

use super::Forward;

/// `[max_len, d_model]` table with `sin(pos / 10000^(2i/d))` in even
/// columns and the matching cosine in odd columns.
pub fn sinusoidal_positions<T: Float>(max_len: usize, d_model: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_len, d_model], |flat| {
        let (pos, col) = (flat / d_model, flat % d_model);
        let i = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        T::from_f64(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Token embedding scaled by `sqrt(d_model)` plus positional encoding, for a
/// `[batch, len]` id matrix.
pub fn embed<T: Float>(
    fw: &Forward<'_, T>,
    table: Var,
    positions: &Tensor<T>,
    ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let max_len = positions.shape()[0];
    if len > max_len {
        return Err(Error::shape(
            "embed",
            format!("sequence length {len} exceeds max_len {max_len}"),
        ));
    }
    let d = positions.last_dim();
    let tape = fw.tape;
    let x = tape.embedding(table, ids, &[batch, len])?;
    let x = tape.scale(x, T::from_f64((d as f64).sqrt()))?;
    let pe = Tensor::new(vec![len, d], positions.data()[..len * d].to_vec())?;
    let pe = tape.constant(pe);
    tape.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;

    #[test]
    fn position_zero_alternates() {
        let pe = sinusoidal_positions::<f64>(3, 6);
        assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn embed_scales_and_shifts() {
        let store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let fw = Forward::eval(&tape, &store);
        let table = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let pe = sinusoidal_positions::<f64>(5, 4);
        let x = embed(&fw, table, &pe, &[2, 0], 1, 2).unwrap();
        let v = tape.value(x).clone();
        assert_eq!(v.shape(), &[1, 2, 4]);
        assert_eq!(v.data()[0], 8.0 * 2.0 + 0.0);
        assert_eq!(v.data()[1], 9.0 * 2.0 + 1.0);
        assert!(embed(&fw, table, &pe, &[0; 6], 1, 6).is_err());
        assert!(embed(&fw, table, &pe, &[3], 1, 1).is_err());
    }
}
