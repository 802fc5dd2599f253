//! Logistic-regression probe on frozen embeddings.

use serde::{Deserialize, Serialize};

use super::{AdamWConfig, LrSchedule, Optimizer};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::numerics::{dot, log_sigmoid_unchecked, sigmoid, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "probe.epochs must be at least 2, probe.lr positive and probe.weight_decay non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_loss: f64,
    pub auc: f64,
}

impl ProbeResult {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

fn check(x: &[Vec<f64>], y: &[u8], what: &str) -> Result<usize> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::domain(format!("{what}: {} inputs for {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::domain(format!("{what}: ragged or empty feature rows")));
    }
    if !y.contains(&0) || !y.contains(&1) || y.iter().any(|&l| l > 1) {
        return Err(Error::domain(format!("{what}: both classes 0 and 1 are required")));
    }
    Ok(d)
}

/// Full-batch logistic regression trained with AdamW on a cosine schedule;
/// reports the held-out AUC.
pub fn linear_probe_binary(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    test_x: &[Vec<f64>],
    test_y: &[u8],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let d = check(train_x, train_y, "probe training set")?;
    if check(test_x, test_y, "probe test set")? != d {
        return Err(Error::domain("probe train and test features differ in width"));
    }
    let mut params = ParamStore::new();
    let w = params.insert("probe.w", 1, d, vec![0.0; d])?;
    let b = params.insert("probe.b", 1, 1, vec![0.0])?;
    let optim = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = Optimizer::new(&params, optim, |_| true);
    let schedule = LrSchedule::new(cfg.lr, 0, cfg.epochs, true)?;
    let n = train_x.len() as f64;
    let mut loss = 0.0;
    for epoch in 0..cfg.epochs {
        params.zero_grads();
        loss = 0.0;
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in train_x.iter().zip(train_y) {
            let z = dot(params.value(w), x) + params.scalar(b);
            let sign = if y == 1 { 1.0 } else { -1.0 };
            loss -= log_sigmoid_unchecked(sign * z) / n;
            let g = (sigmoid(z) - y as f64) / n;
            gw.iter_mut().zip(x).for_each(|(a, xi)| *a += g * xi);
            gb += g;
        }
        params.grad_mut(w).copy_from_slice(&gw);
        params.grad_mut(b)[0] = gb;
        opt.step(&mut params, schedule.lr_at(epoch)?)?;
    }
    let result = ProbeResult {
        weights: params.value(w).to_vec(),
        bias: params.scalar(b),
        train_loss: loss,
        auc: 0.0,
    };
    let scores: Vec<f64> = test_x.iter().map(|x| result.score(x)).collect();
    Ok(ProbeResult {
        auc: auc(&scores, test_y)?,
        ..result
    })
}
