//! SGD with momentum and the step-decay learning-rate schedule.

use crate::error::{shape_mismatch, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_every: 10,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr: must be finite and >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum: must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor: must be finite and > 0, got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every: must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, config: &SgdConfig) -> f64 {
    config.lr0 * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// `v <- momentum * v + g`, `p <- p - lr(epoch) * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: store.tensors().iter().map(Tensor::zeros_like).collect(),
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, &self.config)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], epoch: usize) -> Result<()> {
        if grads.len() != self.velocity.len() || store.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.velocity.len(),
                grads.len(),
                store.len()
            )));
        }
        let lr = T::of(self.lr(epoch));
        let m = T::of(self.config.momentum);
        for ((p, v), g) in store.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(shape_mismatch("sgd_momentum_step", p.shape(), g.shape()));
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = m * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
