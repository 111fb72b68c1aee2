//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || -> Vec<Vec<Real>> { (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect() };
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr`. Parameters whose gradient is
    /// `None` are left untouched, moments included.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Vec<Real>>], lr: Real) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let theta = params.tensor_mut(i).data_mut();
            if g.len() != theta.len() {
                return Err(Error::shape("adamw", &[theta.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                theta[j] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * theta[j]);
            }
        }
        Ok(())
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π t / T_max))`, with `t` clamped to
/// `[0, T_max]`.
pub fn cosine_lr(t: usize, t_max: usize, eta_max: Real, eta_min: Real) -> Real {
    if t_max == 0 {
        return eta_max;
    }
    let frac = t.min(t_max) as Real / t_max as Real;
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI as Real * frac).cos())
}
