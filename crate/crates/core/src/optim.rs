//! Adam with per-tensor learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(ConfigError::invalid("lr", format!("{} must be finite and non-negative", self.lr)));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::invalid(field, format!("{b} is outside [0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(ConfigError::invalid("eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    /// Learning rate per parameter tensor.
    pub lrs: Vec<f64>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// One moment pair per tensor in `shapes`, all at `config.lr`.
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            lrs: vec![config.lr; shapes.len()],
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn set_lr(&mut self, index: usize, lr: f64) -> Result<(), ConfigError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(ConfigError::invalid("lr", format!("{lr} must be finite and non-negative")));
        }
        self.lrs[index] = lr;
        Ok(())
    }

    /// Applies one update. Gradients are checked before anything is touched,
    /// so a non-finite gradient leaves parameters and moments unchanged.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ConfigError::invalid(
                "optimizer",
                format!("{} moment tensors for {} parameters and {} gradients", self.m.len(), params.len(), grads.len()),
            )
            .into());
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(ConfigError::invalid("gradient", format!("shape {:?} for parameter {:?}", g.shape(), params[i].shape())).into());
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.lrs[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mi = beta1 * m.as_f64() + (1.0 - beta1) * g;
                let vi = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                *m = T::c(mi);
                *v = T::c(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *p = T::c(p.as_f64() - step);
            }
        }
        Ok(())
    }
}
