//! AdamW with decoupled, multiplicative weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta1 and optimizer.beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// First and second moments plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        OptimState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update over flat buffers. `decay[i]` selects which coordinates
/// receive weight decay; `None` decays everything.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamWConfig,
    decay: Option<&[bool]>,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::domain(format!(
            "optimizer shape mismatch: {} params, {} grads, {} moments",
            n,
            grads.len(),
            state.m.len()
        )));
    }
    if decay.is_some_and(|d| d.len() != n) {
        return Err(Error::domain("decay mask length differs from parameter count"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for i in 0..n {
        if decay.map_or(true, |d| d[i]) {
            params[i] *= shrink;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW bound to a parameter store, updating only trainable segments.
/// Weight matrices and embeddings are decayed; biases and logit scalars
/// are not.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: AdamWConfig,
    state: OptimState,
    trainable: Vec<(usize, usize)>,
    decay: Vec<bool>,
}

pub fn decays(segment: &str) -> bool {
    segment.ends_with(".w") || segment.ends_with("embed")
}

impl Optimizer {
    pub fn new(params: &ParamStore, cfg: AdamWConfig, trainable: impl Fn(&str) -> bool) -> Self {
        let mut ranges = Vec::new();
        let mut decay = Vec::new();
        for s in params.segments().iter().filter(|s| trainable(&s.name)) {
            ranges.push((s.offset, s.len()));
            decay.extend(std::iter::repeat(decays(&s.name)).take(s.len()));
        }
        Optimizer {
            cfg,
            state: OptimState::new(decay.len()),
            trainable: ranges,
            decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        let mut values = Vec::with_capacity(self.decay.len());
        let mut grads = Vec::with_capacity(self.decay.len());
        for &(off, len) in &self.trainable {
            values.extend_from_slice(&params.values()[off..off + len]);
            grads.extend_from_slice(&params.grads()[off..off + len]);
        }
        adamw_step(&mut values, &grads, &mut self.state, lr, &self.cfg, Some(&self.decay))?;
        let mut at = 0;
        for &(off, len) in &self.trainable {
            params.values_mut()[off..off + len].copy_from_slice(&values[at..at + len]);
            at += len;
        }
        Ok(())
    }
}
