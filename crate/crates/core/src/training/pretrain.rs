//! Staged contrastive pretraining: base sigmoid loss throughout, the
//! change-aware term from its activation epoch on.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{steps_per_epoch, Clock, LrSchedule, Optimizer, PreparedStudy, TrainOutcome};
use crate::encoders::{names, EncoderConfig, Encoder, PairCache, TextCache};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, rng_from, Matrix, ParamStore};
use crate::objectives::{change_aware_loss_grad, siglip_loss_grad, LossParams, StageSchedule};
use crate::training::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// `W`; zero gives plain sigmoid pretraining.
    pub change_weight: f64,
    pub change_activation_epoch: usize,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 100,
            change_weight: 1.0,
            change_activation_epoch: 10,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("pretrain.epochs and pretrain.batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr must be positive"));
        }
        if !(self.change_weight >= 0.0) {
            return Err(Error::config("pretrain.change_weight (W) must be non-negative"));
        }
        if self.change_activation_epoch >= self.epochs {
            return Err(Error::config(
                "pretrain.change_activation_epoch must be smaller than pretrain.epochs",
            ));
        }
        Ok(())
    }
}

/// Per-epoch means over steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub siglip: f64,
    /// Change-aware loss; only evaluated while its weight is non-zero.
    pub change: Option<f64>,
    pub change_weight: f64,
    pub grad_norm_siglip: f64,
    pub grad_norm_change: f64,
    pub grad_norm_total: f64,
    pub min_no_change_per_batch: usize,
    pub log_scale: f64,
    pub bias: f64,
    pub swap_log_scale: f64,
    pub swap_bias: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

/// Shuffled batches of `pool`, each holding at least one study whose flag
/// is 0. A batch without one has its last entry replaced by a random
/// no-change study.
pub fn sample_batches(
    pool: &[usize],
    flags: &[u8],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let quiet: Vec<usize> = pool.iter().copied().filter(|&i| flags[i] == 0).collect();
    if quiet.is_empty() {
        return Err(Error::config(
            "pretraining data contains no no-change studies; every batch needs one",
        ));
    }
    let mut rng = rng_from(seed);
    let mut order = pool.to_vec();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    for b in &mut batches {
        if b.iter().all(|&i| flags[i] != 0) {
            let pick = quiet[rng.gen_range(0..quiet.len())];
            *b.last_mut().expect("non-empty batch") = pick;
        }
        if !b.iter().any(|&i| flags[i] == 0) {
            return Err(Error::domain("sampler produced a batch without a no-change study"));
        }
    }
    Ok(batches)
}

struct Handles {
    log_scale: crate::numerics::SegmentId,
    bias: crate::numerics::SegmentId,
    swap_log_scale: crate::numerics::SegmentId,
    swap_bias: crate::numerics::SegmentId,
}

impl Handles {
    fn new(p: &ParamStore) -> Result<Self> {
        Ok(Handles {
            log_scale: p.id(names::LOG_SCALE)?,
            bias: p.id(names::BIAS)?,
            swap_log_scale: p.id(names::SWAP_LOG_SCALE)?,
            swap_bias: p.id(names::SWAP_BIAS)?,
        })
    }

    fn loss_params(&self, p: &ParamStore, change_weight: f64) -> LossParams {
        LossParams {
            log_scale: p.scalar(self.log_scale),
            bias: p.scalar(self.bias),
            swap_log_scale: p.scalar(self.swap_log_scale),
            swap_bias: p.scalar(self.swap_bias),
            change_weight,
            tcl_weight: 0.0,
        }
    }
}

fn rows(caches: &[&[f64]]) -> Result<Matrix> {
    Matrix::from_rows(caches)
}

/// Runs staged pretraining from `init`.
pub fn pretrain(
    train: &[PreparedStudy],
    init: ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    optim: &AdamWConfig,
) -> Result<TrainOutcome<PretrainLogRecord>> {
    cfg.validate()?;
    optim.validate()?;
    let pool: Vec<usize> = (0..train.len()).filter(|&i| train[i].assessed.is_some()).collect();
    if pool.is_empty() {
        return Err(Error::config("no pretraining studies with a change label"));
    }
    let flags: Vec<u8> = train.iter().map(|s| s.assessed.unwrap_or(1)).collect();
    let per_epoch = steps_per_epoch(pool.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_steps, total, true)?;
    let stages = StageSchedule {
        change_activation_epoch: cfg.change_activation_epoch,
        tcl_activation_epoch: usize::MAX,
    };
    let mut params = init;
    let encoder = Encoder::new(enc_cfg, &params)?;
    let handles = Handles::new(&params)?;
    let mut opt = Optimizer::new(&params, *optim, |_| true);
    let clock = Clock::new(cfg.log_wall_time);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let w = stages.change_weight_at(epoch, cfg.change_weight);
        let batches = sample_batches(&pool, &flags, cfg.batch_size, mix_seed(cfg.seed, epoch as u64))?;
        let mut acc = [0.0; 6];
        let mut min_quiet = usize::MAX;
        let mut lr = 0.0;
        for batch in &batches {
            min_quiet = min_quiet.min(batch.iter().filter(|&&i| flags[i] == 0).count());
            let stats = batch_step(&encoder, &handles, &mut params, train, batch, &flags, w)?;
            lr = schedule.lr_at(step + 1)?;
            opt.step(&mut params, lr)?;
            step += 1;
            for (a, s) in acc.iter_mut().zip(stats) {
                *a += s;
            }
        }
        let n = batches.len() as f64;
        let [total_l, siglip, change, g_s, g_c, g_t] = acc.map(|a| a / n);
        log.push(PretrainLogRecord {
            epoch,
            step,
            lr,
            total: total_l,
            siglip,
            change: (w != 0.0).then_some(change),
            change_weight: w,
            grad_norm_siglip: g_s,
            grad_norm_change: g_c,
            grad_norm_total: g_t,
            min_no_change_per_batch: min_quiet,
            log_scale: params.scalar(handles.log_scale),
            bias: params.scalar(handles.bias),
            swap_log_scale: params.scalar(handles.swap_log_scale),
            swap_bias: params.scalar(handles.swap_bias),
            wall_time: clock.elapsed(),
        });
    }
    params.zero_grads();
    Ok(TrainOutcome { params, log })
}

struct ItemCache {
    fwd: PairCache,
    swap: Option<PairCache>,
    text: TextCache,
}

/// Forward, loss and backward for one batch; leaves the gradient in
/// `params`. Returns (total, siglip, change, |g_siglip|, |g_change|, |g|).
fn batch_step(
    encoder: &Encoder,
    h: &Handles,
    params: &mut ParamStore,
    train: &[PreparedStudy],
    batch: &[usize],
    flags: &[u8],
    w: f64,
) -> Result<[f64; 6]> {
    let snapshot: &ParamStore = params;
    let caches: Vec<ItemCache> = batch
        .par_iter()
        .map(|&i| {
            let s = &train[i];
            Ok(ItemCache {
                fwd: encoder.pair_forward(snapshot, &s.prev, &s.cur)?,
                swap: if w != 0.0 {
                    Some(encoder.pair_forward(snapshot, &s.cur, &s.prev)?)
                } else {
                    None
                },
                text: encoder.text_forward(snapshot, &s.report)?,
            })
        })
        .collect::<Result<_>>()?;
    let v = rows(&caches.iter().map(|c| c.fwd.embedding()).collect::<Vec<_>>())?;
    let t = rows(&caches.iter().map(|c| c.text.embedding()).collect::<Vec<_>>())?;
    let lp = h.loss_params(params, w);
    let siglip = siglip_loss_grad(&v, &t, &lp)?;
    let change = if w != 0.0 {
        let vs = rows(
            &caches
                .iter()
                .map(|c| c.swap.as_ref().expect("swap pass").embedding())
                .collect::<Vec<_>>(),
        )?;
        let c: Vec<u8> = batch.iter().map(|&i| flags[i]).collect();
        Some(change_aware_loss_grad(&vs, &t, &c, &lp)?)
    } else {
        None
    };

    params.zero_grads();
    let mut g_change = 0.0;
    let mut saved = None;
    if let Some(ch) = &change {
        for (k, (&i, c)) in batch.iter().zip(&caches).enumerate() {
            let s = &train[i];
            let dv: Vec<f64> = ch.d_img.row(k).iter().map(|g| w * g).collect();
            let swap = c.swap.as_ref().expect("swap pass");
            encoder.pair_backward(params, &s.cur, &s.prev, swap, &dv);
            let dt: Vec<f64> = ch.d_txt.row(k).iter().map(|g| w * g).collect();
            encoder.text_backward(params, &c.text, &dt);
        }
        params.grad_mut(h.swap_log_scale)[0] += w * ch.d_log_scale;
        params.grad_mut(h.swap_bias)[0] += w * ch.d_bias;
        g_change = params.grad_norm();
        saved = Some(params.grads().to_vec());
        params.zero_grads();
    }
    for (k, (&i, c)) in batch.iter().zip(&caches).enumerate() {
        let s = &train[i];
        encoder.pair_backward(params, &s.prev, &s.cur, &c.fwd, siglip.d_img.row(k));
        encoder.text_backward(params, &c.text, siglip.d_txt.row(k));
    }
    params.grad_mut(h.log_scale)[0] += siglip.d_log_scale;
    params.grad_mut(h.bias)[0] += siglip.d_bias;
    let g_siglip = params.grad_norm();
    if let Some(g) = saved {
        params
            .grads_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
    }
    let change_loss = change.as_ref().map_or(0.0, |c| c.loss);
    let total = if w == 0.0 {
        siglip.loss
    } else {
        siglip.loss + w * change_loss
    };
    Ok([total, siglip.loss, change_loss, g_siglip, g_change, params.grad_norm()])
}
