use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Gradients keyed by parameter index.
pub type Grads = BTreeMap<usize, Tensor>;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `peak` over `warmup_ratio · total` steps, then
/// linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (s, t) = (step.min(total) as f64, total as f64);
    let warm = warmup_ratio * t;
    if s < warm {
        peak * s / warm
    } else if t > warm {
        peak * (t - s) / (t - warm)
    } else {
        peak
    }
}

/// L2 norm over every gradient tensor taken as one vector.
pub fn global_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().for_each(|t| t.scale_in_place(c));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter, for bias correction.
    pub t: u64,
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    /// Optimizer steps taken.
    pub step: u64,
    pub moments: BTreeMap<usize, Moments>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every trainable parameter that has a gradient.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        for (&idx, g) in grads {
            let id = ParamId(idx);
            if idx >= params.len() {
                return Err(Error::Index {
                    index: idx,
                    size: params.len(),
                });
            }
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.get_mut(id);
            p.expect_same_shape(g)?;
            let mo = self.moments.entry(idx).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            mo.t += 1;
            let bc1 = 1.0 - BETA1.powi(mo.t as i32);
            let bc2 = 1.0 - BETA2.powi(mo.t as i32);
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gv;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gv * gv;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Adds `other` into `acc`, creating entries as needed.
pub fn accumulate(acc: &mut Grads, other: Grads) -> Result<()> {
    for (k, g) in other {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g)?,
            None => {
                acc.insert(k, g);
            }
        }
    }
    Ok(())
}
