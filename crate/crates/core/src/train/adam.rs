//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VigtError};
use crate::tensor::{Gradients, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(VigtError::config(format!("lr={} must be >= 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(VigtError::config(format!("{name}={b} not in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(VigtError::config("eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<E> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(config: AdamConfig, store: &ParamStore<E>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<E>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update. Parameters missing from `grads` see a zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(VigtError::Usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(VigtError::Numeric(format!(
                    "non-finite gradient for parameter `{}`",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = E::from_f64_lossy(c.beta1);
        let b2 = E::from_f64_lossy(c.beta2);
        let one = E::one();
        let bc1 = E::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = E::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let lr = E::from_f64_lossy(c.lr);
        let eps = E::from_f64_lossy(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id).map(Tensor::data);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.map_or(E::zero(), |g| g[k]);
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
