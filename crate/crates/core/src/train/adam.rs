use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction. Moments are kept in the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Largest per-coordinate update Adam can make at step `t` for any
    /// gradient history: `lr (1-b1)/sqrt(1-b2) sqrt(sum_{k<t} g^k)
    /// sqrt(1-b2^t)/(1-b1^t)` with `g = b1^2/b2`, by Cauchy-Schwarz on the
    /// moment sums (ignoring `eps`, which only shrinks updates).
    pub fn update_bound(&self, lr: f64, t: u64) -> f64 {
        let AdamConfig { beta1: b1, beta2: b2, .. } = self.config;
        let g = b1 * b1 / b2;
        let geometric = if (g - 1.0).abs() < 1e-12 {
            t as f64
        } else {
            (1.0 - g.powi(t as i32)) / (1.0 - g)
        };
        lr * (1.0 - b1) / (1.0 - b2).sqrt() * geometric.sqrt() * (1.0 - b2.powi(t as i32)).sqrt()
            / (1.0 - b1.powi(t as i32))
    }

    /// Applies one update. Parameters missing from `grads` get a zero
    /// gradient. Returns the largest absolute coordinate update.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<f64> {
        if store.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads {
            if g.shape() != store.value(*id).shape() {
                return Err(Error::shape("adam_step", format!("gradient shape mismatch for {}", store.name(*id))));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {} at element {pos}",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1: b1, beta2: b2, eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut max_update = 0.0f64;
        let mut grad_iter = grads.iter().peekable();
        for id in store.ids().collect::<Vec<_>>() {
            let k = id.index();
            let g = match grad_iter.peek() {
                Some((gid, _)) if *gid == id => grad_iter.next().map(|(_, g)| g),
                _ => None,
            };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                max_update = max_update.max(update.abs());
                p[i] = T::from_f64(p[i].as_f64() - update);
            }
        }
        if grad_iter.next().is_some() {
            return Err(Error::Invalid("gradients must be sorted by parameter id".into()));
        }
        Ok(max_update)
    }

    /// Moments as a checkpoint: `m.<name>` and `v.<name>` records.
    pub fn to_checkpoint(&self, store: &ParamStore<T>, config_digest: u64) -> Checkpoint {
        let mut params = Vec::with_capacity(2 * self.m.len());
        for (id, name, _) in store.iter() {
            params.push((format!("m.{name}"), self.m[id.index()].cast::<f32>()));
            params.push((format!("v.{name}"), self.v[id.index()].cast::<f32>()));
        }
        Checkpoint {
            step: self.step,
            config_digest,
            params,
        }
    }

    pub fn from_checkpoint(config: AdamConfig, store: &ParamStore<T>, ck: &Checkpoint) -> Result<Self> {
        if ck.params.len() != 2 * store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let mut adam = Adam::new(config, store);
        adam.step = ck.step;
        for (id, name, value) in store.iter() {
            for (slot, prefix, offset) in [(&mut adam.m, "m", 0), (&mut adam.v, "v", 1)] {
                let (rec_name, t) = &ck.params[2 * id.index() + offset];
                if rec_name != &format!("{prefix}.{name}") || t.shape() != value.shape() {
                    return Err(Error::Checkpoint(format!("optimizer record {rec_name} does not match {name}")));
                }
                slot[id.index()] = t.cast::<T>();
            }
        }
        Ok(adam)
    }
}

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}
