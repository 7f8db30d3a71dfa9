//! Adam optimizer over a filtered subset of model layers.

use super::{LayerId, ModelParams};
use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_arg!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(invalid_arg!("invalid Adam moments"));
        }
        Ok(())
    }
}

/// Moment buffers for one parameter group. Only layers accepted by the group
/// filter and currently trainable are updated.
pub struct Adam<T> {
    cfg: AdamConfig,
    group: fn(LayerId) -> bool,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, group: fn(LayerId) -> bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, group, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        let enabled: Vec<bool> = params
            .slots()
            .iter()
            .map(|s| s.param && (self.group)(s.layer) && params.is_trainable(s.layer))
            .collect();
        let g = grads.slots();
        let grads: Vec<&[T]> = g.iter().map(|s| s.data).collect();
        let targets: Vec<Option<&mut [T]>> = params
            .slots_mut()
            .into_iter()
            .zip(&enabled)
            .map(|(s, &on)| on.then_some(s.data))
            .collect();
        self.apply(targets, &grads);
    }

    /// Updates free-standing tensors; `params[k]` pairs with `grads[k]` on every call.
    pub fn step_tensors(&mut self, params: Vec<&mut [T]>, grads: &[&[T]]) {
        self.apply(params.into_iter().map(Some).collect(), grads);
    }

    fn apply(&mut self, params: Vec<Option<&mut [T]>>, grads: &[&[T]]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        for (k, slot) in params.into_iter().enumerate() {
            let Some(p) = slot else { continue };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for (i, p) in p.iter_mut().enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

pub fn all_layers(_: LayerId) -> bool {
    true
}

pub fn generator_layers(l: LayerId) -> bool {
    !l.is_discriminator()
}

pub fn discriminator_layers(l: LayerId) -> bool {
    l.is_discriminator()
}

pub fn coarse_layer(l: LayerId) -> bool {
    l == LayerId::Coarse
}

pub fn recurrent_layers(l: LayerId) -> bool {
    matches!(l, LayerId::Recurrent(_))
}
