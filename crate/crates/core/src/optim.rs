//! Adam with bias correction, keyed by parameter name.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::NetworkState;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optim.{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optim.eps = {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update `θ ← θ − lr·m̂/(√v̂ + ε)`. Parameters without a gradient
    /// are left untouched and keep their moments.
    pub fn step(&mut self, state: &mut NetworkState<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (step, eps) = (T::of(lr / c1), T::of(eps));
        let inv_c2 = T::of(1.0 / c2);
        // Walk parameters in registration order so moment order is stable.
        let names: Vec<String> = state.params().map(|(n, _)| n.to_string()).collect();
        if let Some(extra) = grads.keys().find(|k| !names.contains(k)) {
            return Err(Error::invalid("adam", format!("gradient for unknown parameter {extra}")));
        }
        for name in &names {
            let Some(g) = grads.get(name) else { continue };
            let param = state.tensor_mut(name)?;
            if param.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), param.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            for (((p, m), v), &g) in param
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
