use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Gradients, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |s: &ParamStore<T>| -> Vec<Tensor<T>> {
            s.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect()
        };
        AdamW {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr`. Every trainable parameter must
    /// have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if p.trainable && grads.get(id).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let lr_t = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.eps);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = grads.get(id).expect("checked above");
            let shrink = if p.decay {
                T::one() - lr_t * T::from_f64_lossy(c.weight_decay)
            } else {
                T::one()
            };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `base_lr` to zero over `total_steps`, after an optional
/// linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        LinearSchedule {
            base_lr,
            total_steps,
            warmup_steps: 0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (self.total_steps - step) as f64 / span
    }
}
