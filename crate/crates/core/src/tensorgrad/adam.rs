use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    lr_scale: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        Self::for_shapes(config, params.tensors())
    }

    pub fn for_shapes(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|t| vec![S::zero(); t.len()]).collect(),
            v: params.iter().map(|t| vec![S::zero(); t.len()]).collect(),
            lr_scale: vec![S::one(); params.len()],
        }
    }

    /// Per-tensor learning-rate multiplier.
    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = S::from_f64_lossy(scale);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn update(&mut self, params: &mut ParamSet<S>, grads: &[Vec<S>]) -> Result<()> {
        adam_update(params.tensors_mut(), grads, self)
    }
}

/// One Adam step over `params` with gradients `grads`.
pub(crate) fn adam_update<S: Scalar>(params: &mut [Tensor<S>], grads: &[Vec<S>], state: &mut Adam<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!("adam: param of {} elements got {} grads", p.len(), g.len())));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let (b1, b2) = (S::from_f64_lossy(cfg.beta1), S::from_f64_lossy(cfg.beta2));
    let eps = S::from_f64_lossy(cfg.eps);
    let bc1 = S::one() - S::from_f64_lossy(cfg.beta1.powi(state.step as i32));
    let bc2 = S::one() - S::from_f64_lossy(cfg.beta2.powi(state.step as i32));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = S::from_f64_lossy(cfg.lr) * state.lr_scale[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
