use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, rho: 0.9, epsilon: 1e-8 }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid("rho must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("optimizer epsilon must be positive"));
        }
        Ok(())
    }
}

/// RMSProp state: `acc <- rho acc + (1 - rho) g^2`,
/// `theta <- theta - lr g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    acc: Option<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, acc: None })
    }

    pub fn accumulators(&self) -> Option<&[f64]> {
        self.acc.as_deref()
    }

    /// Flat update; accumulators are created on first use and bound to that length.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient lengths differ"));
        }
        let acc = self.acc.get_or_insert_with(|| vec![0.0; params.len()]);
        if acc.len() != params.len() {
            return Err(Error::invalid("parameter count changed between updates"));
        }
        let RmsPropConfig { learning_rate, rho, epsilon } = self.config;
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
            *a = rho * *a + (1.0 - rho) * g * g;
            *p -= learning_rate * g / (math::sqrt(*a) + epsilon);
        }
        Ok(())
    }

    /// Structured update over matching parameter sets.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        let n = params.parameter_count();
        if g.len() != n {
            return Err(Error::invalid("parameter and gradient shapes differ"));
        }
        let acc = self.acc.get_or_insert_with(|| vec![0.0; n]);
        if acc.len() != n {
            return Err(Error::invalid("parameter count changed between updates"));
        }
        let RmsPropConfig { learning_rate, rho, epsilon } = self.config;
        let mut offset = 0;
        params.visit_mut("", &mut |_, _, data| {
            let gs = &g[offset..offset + data.len()];
            let acs = &mut acc[offset..offset + data.len()];
            for ((p, &gi), a) in data.iter_mut().zip(gs).zip(acs.iter_mut()) {
                *a = rho * *a + (1.0 - rho) * gi * gi;
                *p -= learning_rate * gi / (math::sqrt(*a) + epsilon);
            }
            offset += data.len();
        });
        Ok(())
    }
}
