use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("AdamW hyperparameters out of range: {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    m: ParamStore<S>,
    v: ParamStore<S>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamStore<S> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamStore<S> {
        &self.v
    }

    /// One update. Parameters without an entry in `grads` see a zero
    /// gradient (weight decay still applies). A non-finite or mis-shaped
    /// gradient rejects the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &IndexMap<String, Tensor<S>>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .map_err(|_| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("`{name}`: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let one = S::one();
        let bc1 = S::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = S::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = S::from_f64_lossy(c.lr);
        let eps = S::from_f64_lossy(c.eps);
        let wd = S::from_f64_lossy(c.weight_decay);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let theta = p.data()[i];
                p.data_mut()[i] = theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
            }
        }
        Ok(())
    }
}
