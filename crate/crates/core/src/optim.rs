use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Hyperparameters of the adaptive-moment optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed and freezes the parameters
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Optimizer state across all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            t: 0,
            moments: sizes.into_iter().map(Moments::zeros).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update of every parameter.
///
/// `grads[i] == None` means parameter `i` received no gradient this step;
/// its moments still decay as if the gradient were zero.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for ((p, g), mom) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        if mom.m.len() != p.len() {
            return Err(Error::Contract("moment size does not match parameter".into()));
        }
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            mom.m[j] = cfg.beta1 * mom.m[j] + (1.0 - cfg.beta1) * gj;
            mom.v[j] = cfg.beta2 * mom.v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = mom.m[j] / c1;
            let v_hat = mom.v[j] / c2;
            p[j] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}
