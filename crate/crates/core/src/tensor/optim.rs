use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |_: ()| {
            store
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, e)) = store
            .iter()
            .find(|(_, e)| e.kind == ParamKind::Trainable && !e.grad.is_finite())
        {
            return Err(Error::NonFinite(format!("gradient of {}", e.name)));
        }
        if store.is_frozen() {
            return Ok(());
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = e.grad.data();
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] + c.weight_decay * *p;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
