use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// Elementwise mean of parameters. Values are sorted per element before an
/// f64 sum, so the result does not depend on argument order. The step is the
/// largest input step.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Invalid("no checkpoints to average".into()))?;
    for ck in &checkpoints[1..] {
        if ck.config_digest != first.config_digest {
            return Err(Error::Checkpoint("checkpoints come from different configurations".into()));
        }
        if ck.names_and_shapes() != first.names_and_shapes() {
            return Err(Error::Checkpoint("checkpoints differ in parameter names or shapes".into()));
        }
    }
    let k = checkpoints.len() as f64;
    let mut column = Vec::with_capacity(checkpoints.len());
    let params = first
        .params
        .iter()
        .enumerate()
        .map(|(p, (name, t))| {
            let data = (0..t.numel())
                .map(|i| {
                    column.clear();
                    column.extend(checkpoints.iter().map(|ck| ck.params[p].1.data()[i] as f64));
                    column.sort_by(f64::total_cmp);
                    (column.iter().sum::<f64>() / k) as f32
                })
                .collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        config_digest: first.config_digest,
        params,
    })
}
