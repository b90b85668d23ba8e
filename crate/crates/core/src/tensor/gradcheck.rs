//! Central finite-difference gradient oracle.
//!
//! Vector-valued functions are reduced to a scalar by a fixed pseudo-random
//! projection so that every output coordinate contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;

use super::{Tape, Tensor, Var};

const PROJECTION_SEED: u64 = 0x5eed_9dc4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Reduces `out` to `sum(out * w)` with `w` drawn from a fixed stream.
fn project(tape: &Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Maximum relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x + h) - f(x - h)) / 2h`, taken over every
/// coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let loss = project(&tape, out)?;
        let v = tape.value(loss).item();
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = project(&tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar-valued `f` with respect to every scalar
/// of every parameter in `params`.
pub fn grad_check_params<F>(params: &mut ParamStore<f64>, f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let out = f(&tape, params)?;
    let loss = project(&tape, out)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; params.len()];
    for (id, g) in tape.param_grads() {
        analytic[id.index()] = Some(g);
    }
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let out = f(&tape, store)?;
        let loss = project(&tape, out)?;
        let v = tape.value(loss).item();
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.value(id).numel();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
            }
        }
    }
    Ok(report)
}
