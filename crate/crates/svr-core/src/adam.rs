//! ADAM optimizer over a [`ParamSet`](crate::weights::ParamSet).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::ParamSet;

/// ADAM with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first update.
#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update. `grads` maps parameter names to flat gradients;
    /// trainable parameters without a gradient entry are left unchanged,
    /// gradients for unknown or frozen parameters are a contract error.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get(name)?;
            if !p.trainable {
                return Err(Error::contract(format!(
                    "gradient supplied for frozen parameter '{name}'"
                )));
            }
            if g.len() != p.value.numel() {
                return Err(Error::dimension(format!(
                    "gradient for '{name}' has {} values, parameter has {}",
                    g.len(),
                    p.value.numel()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let shape = p.value.shape().to_vec();
            let mut new_val = p.value.data().to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new_val[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set_value(name, Tensor::new(&shape, new_val)?)?;
        }
        Ok(())
    }
}
