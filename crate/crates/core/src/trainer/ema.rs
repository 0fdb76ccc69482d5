use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Shadow copies `θs` of the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<usize, Tensor>,
}

impl EmaState {
    /// Shadows start as exact copies of the trainable parameters.
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("ema decay {decay} outside (0, 1)")));
        }
        let shadow = params
            .trainable_ids()
            .into_iter()
            .map(|id| (id.0, params.get(id).clone()))
            .collect();
        Ok(Self { decay, shadow })
    }

    /// `θs ← η·θs + (1−η)·θt` for every shadowed tensor.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        let eta = self.decay;
        for (&idx, s) in self.shadow.iter_mut() {
            let t = params.get(ParamId(idx));
            if s.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "ema shadow of {} is {:?}, parameter is {:?}",
                    params.name(ParamId(idx)),
                    s.shape(),
                    t.shape()
                )));
            }
            for (a, &b) in s.data_mut().iter_mut().zip(t.data()) {
                *a = eta * *a + (1.0 - eta) * b;
            }
        }
        Ok(())
    }

    /// Exchanges shadow and live values. Calling it twice restores both
    /// sides bit for bit.
    pub fn swap(&mut self, params: &mut ParamStore) {
        for (&idx, s) in self.shadow.iter_mut() {
            std::mem::swap(s, params.get_mut(ParamId(idx)));
        }
    }
}
