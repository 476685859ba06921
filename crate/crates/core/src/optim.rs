//! Adam with bias correction and a staircase exponential learning-rate decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    /// Multiplicative learning-rate decay applied once per `decay_period` steps.
    pub decay_rate: f64,
    /// Not read from config files: the training protocol sets it from
    /// `train.decay_period` or the epoch length.
    #[serde(skip)]
    pub decay_period: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 1e-4,
            decay_rate: 0.96,
            decay_period: 100,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::config(format!(
                "adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) || !(self.base_lr > 0.0) {
            return Err(Error::config("adam epsilon and base_lr must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_period == 0 {
            return Err(Error::config("decay_period must be positive"));
        }
        Ok(())
    }

    /// `base_lr * decay_rate^(step / decay_period)` with integer division.
    pub fn lr_at(&self, step: u64) -> f64 {
        let periods = (step / self.decay_period).min(i32::MAX as u64) as i32;
        self.base_lr * self.decay_rate.powi(periods)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Optimizer state: step counter plus per-parameter moment buffers, created
/// lazily the first time a parameter receives a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn effective_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Apply one update to every parameter named in `grads`.
    ///
    /// Validation happens before anything is written, so a rejected step
    /// (unknown name, shape mismatch, NaN/Inf gradient) leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(m) = self.moments.get(name) {
                if m.first.len() != p.numel() {
                    return Err(Error::invalid(format!("moment buffer size changed for {name}")));
                }
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        let c = &self.config;
        let lr = c.lr_at(self.step);
        let t = (self.step + 1).min(i32::MAX as u64) as i32;
        let bias1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.epsilon));

        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![T::zero(); g.numel()],
                second: vec![T::zero(); g.numel()],
            });
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut().zip(m.second.iter_mut()));
            for ((p, &g), (m1, m2)) in iter {
                *m1 = b1 * *m1 + one_b1 * g;
                *m2 = b2 * *m2 + one_b2 * g * g;
                let m_hat = *m1 / bias1;
                let v_hat = *m2 / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
