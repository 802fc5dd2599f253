//! Supervised progression fine-tuning with a linear head on the pair
//! embedding. The text tower and logit heads stay frozen.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{steps_per_epoch, Clock, LrSchedule, Optimizer, PreparedStudy, TrainOutcome};
use crate::encoders::{names, EncoderConfig, Encoder, PairCache, PooledImage};
use crate::error::{Error, Result};
use crate::inference::ProgressionLabel;
use crate::numerics::{affine, mix_seed, rng_from, ParamStore, SegmentId};
use crate::objectives::{
    finetune_total_grad, forward_ce_grad, LossParams, ProbTriple, StageSchedule,
};
use crate::synthdata::Finding;
use crate::training::AdamWConfig;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneVariant {
    /// Forward-order cross-entropy only.
    BaselineCe,
    Bice,
    BiceTcl,
}

impl FinetuneVariant {
    pub const ALL: [FinetuneVariant; 3] = [
        FinetuneVariant::BaselineCe,
        FinetuneVariant::Bice,
        FinetuneVariant::BiceTcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneVariant::BaselineCe => "baseline-ce",
            FinetuneVariant::Bice => "bice",
            FinetuneVariant::BiceTcl => "bice-tcl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FinetuneVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown fine-tuning variant {s:?} (expected baseline-ce, bice or bice-tcl)"
                ))
            })
    }
}

impl fmt::Display for FinetuneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// `λ`.
    pub tcl_weight: f64,
    pub tcl_activation_epoch: usize,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-5,
            warmup_fraction: 0.05,
            tcl_weight: 50.0,
            tcl_activation_epoch: 20,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("finetune.epochs and finetune.batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("finetune.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("finetune.warmup_fraction must lie in [0, 1)"));
        }
        if !(self.tcl_weight >= 0.0) {
            return Err(Error::config("finetune.tcl_weight (λ) must be non-negative"));
        }
        if self.tcl_activation_epoch >= self.epochs {
            return Err(Error::config(
                "finetune.tcl_activation_epoch must be smaller than finetune.epochs",
            ));
        }
        Ok(())
    }
}

/// Adds a zero-bias linear head with three logits per finding.
pub fn attach_head(params: &mut ParamStore, enc_cfg: &EncoderConfig, findings: usize, seed: u64) -> Result<()> {
    if params.contains(HEAD_W) {
        return Ok(());
    }
    let d = enc_cfg.proj_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = rng_from(seed);
    let w: Vec<f64> = (0..3 * findings * d).map(|_| rng.gen_range(-scale..scale)).collect();
    params.insert(HEAD_W, 3 * findings, d, w)?;
    params.insert(HEAD_B, 3 * findings, 1, vec![0.0; 3 * findings])?;
    Ok(())
}

/// Pair encoder plus progression head.
#[derive(Clone, Debug)]
pub struct Classifier {
    encoder: Encoder,
    head_w: SegmentId,
    head_b: SegmentId,
    findings: usize,
}

impl Classifier {
    pub fn new(enc_cfg: &EncoderConfig, params: &ParamStore) -> Result<Self> {
        let encoder = Encoder::new(enc_cfg, params)?;
        let head_w = params.id(HEAD_W)?;
        let head_b = params.id(HEAD_B)?;
        let seg = params.segment(head_w);
        if seg.cols != enc_cfg.proj_dim || seg.rows % 3 != 0 || seg.rows == 0 {
            return Err(Error::domain("classifier head does not match the encoder"));
        }
        Ok(Classifier {
            encoder,
            head_w,
            head_b,
            findings: seg.rows / 3,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn findings(&self) -> usize {
        self.findings
    }

    pub fn logits_of(&self, params: &ParamStore, v: &[f64]) -> Vec<[f64; 3]> {
        let mut out = vec![0.0; 3 * self.findings];
        affine(params.value(self.head_w), Some(params.value(self.head_b)), v, &mut out);
        out.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Progression probabilities for every finding of the pair (a, b).
    pub fn probs(&self, params: &ParamStore, a: &PooledImage, b: &PooledImage) -> Result<Vec<ProbTriple>> {
        let cache = self.encoder.pair_forward(params, a, b)?;
        self.logits_of(params, cache.embedding())
            .iter()
            .map(ProbTriple::from_logits)
            .collect()
    }

    /// Adds head gradients and returns `dL/dv`.
    fn head_backward(&self, params: &mut ParamStore, v: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut dv = vec![0.0; d];
        let w = params.value(self.head_w).to_vec();
        for (r, g) in dlogits.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &w[r * d..(r + 1) * d];
            dv.iter_mut().zip(row).for_each(|(a, b)| *a += g * b);
        }
        let gw = params.grad_mut(self.head_w);
        for (r, g) in dlogits.iter().enumerate() {
            gw[r * d..(r + 1) * d]
                .iter_mut()
                .zip(v)
                .for_each(|(a, b)| *a += g * b);
        }
        params
            .grad_mut(self.head_b)
            .iter_mut()
            .zip(dlogits)
            .for_each(|(a, b)| *a += b);
        dv
    }
}

/// Segments updated during fine-tuning.
pub fn finetune_trainable(name: &str) -> bool {
    names::IMAGE_SIDE.contains(&name) || name == HEAD_W || name == HEAD_B
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRecord {
    pub variant: FinetuneVariant,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Forward CE for the baseline, BiCE otherwise.
    pub classification: f64,
    pub tcl: Option<f64>,
    pub tcl_weight: f64,
    pub grad_norm_classification: f64,
    pub grad_norm_tcl: f64,
    pub grad_norm_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

/// Batch statistics: (total, classification, tcl, |g_cls|, |g_tcl|, |g|).
pub type BatchStats = [f64; 6];

struct Item {
    fwd: PairCache,
    bwd: Option<PairCache>,
}

/// Loss and gradient of one batch, left in `params`. The reversed pass is
/// skipped for the baseline unless `materialize_reversed` is set; its
/// output is never read by the baseline loss.
pub fn batch_gradient(
    clf: &Classifier,
    params: &mut ParamStore,
    data: &[PreparedStudy],
    batch: &[usize],
    variant: FinetuneVariant,
    lambda_eff: f64,
    materialize_reversed: bool,
) -> Result<BatchStats> {
    let enc = &clf.encoder;
    let snapshot: &ParamStore = params;
    let need_bwd = variant != FinetuneVariant::BaselineCe || materialize_reversed;
    let items: Vec<Item> = batch
        .par_iter()
        .map(|&i| {
            let s = &data[i];
            Ok(Item {
                fwd: enc.pair_forward(snapshot, &s.prev, &s.cur)?,
                bwd: if need_bwd {
                    Some(enc.pair_forward(snapshot, &s.cur, &s.prev)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<_>>()?;
    let n = batch.len();
    let f = clf.findings;
    let lf: Vec<Vec<[f64; 3]>> = items.iter().map(|it| clf.logits_of(params, it.fwd.embedding())).collect();
    let lb: Vec<Vec<[f64; 3]>> = items
        .iter()
        .map(|it| it.bwd.as_ref().map_or_else(Vec::new, |c| clf.logits_of(params, c.embedding())))
        .collect();
    let mut d_cls_f = vec![vec![0.0; 3 * f]; n];
    let mut d_cls_b = vec![vec![0.0; 3 * f]; n];
    let mut d_tcl_f = vec![vec![0.0; 3 * f]; n];
    let mut d_tcl_b = vec![vec![0.0; 3 * f]; n];
    let (mut cls, mut tcl) = (0.0, 0.0);
    let inv_f = 1.0 / f as f64;
    for k in 0..f {
        let y: Vec<ProgressionLabel> = batch.iter().map(|&i| data[i].labels[k]).collect();
        let fwd: Vec<[f64; 3]> = lf.iter().map(|l| l[k]).collect();
        match variant {
            FinetuneVariant::BaselineCe => {
                for (j, (l, &label)) in fwd.iter().zip(&y).enumerate() {
                    let (loss, g) = forward_ce_grad(l, label)?;
                    cls += loss * inv_f / n as f64;
                    for c in 0..3 {
                        d_cls_f[j][3 * k + c] = g[c] * inv_f / n as f64;
                    }
                }
            }
            FinetuneVariant::Bice | FinetuneVariant::BiceTcl => {
                let bwd: Vec<[f64; 3]> = lb.iter().map(|l| l[k]).collect();
                let base = LossParams {
                    tcl_weight: 0.0,
                    ..LossParams::default()
                };
                let stages = StageSchedule::default();
                let plain = finetune_total_grad(&fwd, &bwd, &y, &base, 0, &stages)?;
                cls += plain.bice * inv_f;
                tcl += plain.tcl * inv_f;
                for j in 0..n {
                    for c in 0..3 {
                        d_cls_f[j][3 * k + c] = plain.d_fwd[j][c] * inv_f;
                        d_cls_b[j][3 * k + c] = plain.d_bwd[j][c] * inv_f;
                    }
                }
                if lambda_eff != 0.0 {
                    let with = LossParams {
                        tcl_weight: lambda_eff,
                        ..LossParams::default()
                    };
                    let full = finetune_total_grad(&fwd, &bwd, &y, &with, usize::MAX, &stages)?;
                    for j in 0..n {
                        for c in 0..3 {
                            d_tcl_f[j][3 * k + c] = (full.d_fwd[j][c] - plain.d_fwd[j][c]) * inv_f;
                            d_tcl_b[j][3 * k + c] = (full.d_bwd[j][c] - plain.d_bwd[j][c]) * inv_f;
                        }
                    }
                }
            }
        }
    }

    params.zero_grads();
    let mut g_tcl = 0.0;
    let mut saved = None;
    if lambda_eff != 0.0 && variant == FinetuneVariant::BiceTcl {
        backprop(clf, params, data, batch, &items, &d_tcl_f, &d_tcl_b);
        g_tcl = params.grad_norm();
        saved = Some(params.grads().to_vec());
        params.zero_grads();
    }
    backprop(clf, params, data, batch, &items, &d_cls_f, &d_cls_b);
    let g_cls = params.grad_norm();
    if let Some(g) = saved {
        params.grads_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let lambda = if variant == FinetuneVariant::BiceTcl { lambda_eff } else { 0.0 };
    let total = if lambda == 0.0 { cls } else { cls + lambda * tcl };
    Ok([total, cls, tcl, g_cls, g_tcl, params.grad_norm()])
}

fn backprop(
    clf: &Classifier,
    params: &mut ParamStore,
    data: &[PreparedStudy],
    batch: &[usize],
    items: &[Item],
    d_fwd: &[Vec<f64>],
    d_bwd: &[Vec<f64>],
) {
    for (j, (&i, it)) in batch.iter().zip(items).enumerate() {
        let s = &data[i];
        let dv = clf.head_backward(params, it.fwd.embedding(), &d_fwd[j]);
        clf.encoder.pair_backward(params, &s.prev, &s.cur, &it.fwd, &dv);
        if let Some(b) = &it.bwd {
            if d_bwd[j].iter().any(|g| *g != 0.0) {
                let dv = clf.head_backward(params, b.embedding(), &d_bwd[j]);
                clf.encoder.pair_backward(params, &s.cur, &s.prev, b, &dv);
            }
        }
    }
}

/// Fine-tunes a copy of `pretrained` with a freshly attached head.
pub fn finetune(
    train: &[PreparedStudy],
    pretrained: &ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &FinetuneConfig,
    variant: FinetuneVariant,
    optim: &AdamWConfig,
) -> Result<TrainOutcome<FinetuneLogRecord>> {
    cfg.validate()?;
    optim.validate()?;
    if train.is_empty() {
        return Err(Error::config("no fine-tuning studies"));
    }
    let findings = train[0].labels.len();
    if findings == 0 || train.iter().any(|s| s.labels.len() != findings) {
        return Err(Error::domain("studies disagree on the number of findings"));
    }
    let mut params = pretrained.clone();
    attach_head(&mut params, enc_cfg, findings, mix_seed(cfg.seed, 0x4ead))?;
    let clf = Classifier::new(enc_cfg, &params)?;
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    let schedule = LrSchedule::new(cfg.lr, warmup, total, true)?;
    let stages = StageSchedule {
        change_activation_epoch: usize::MAX,
        tcl_activation_epoch: cfg.tcl_activation_epoch,
    };
    let mut opt = Optimizer::new(&params, *optim, finetune_trainable);
    let clock = Clock::new(cfg.log_wall_time);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let all: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lambda = match variant {
            FinetuneVariant::BiceTcl => stages.tcl_weight_at(epoch, cfg.tcl_weight),
            _ => 0.0,
        };
        let mut order = all.clone();
        order.shuffle(&mut rng_from(mix_seed(cfg.seed, epoch as u64)));
        let mut acc = [0.0; 6];
        let mut lr = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let stats = batch_gradient(&clf, &mut params, train, batch, variant, lambda, false)?;
            lr = schedule.lr_at(step + 1)?;
            opt.step(&mut params, lr)?;
            step += 1;
            for (a, s) in acc.iter_mut().zip(stats) {
                *a += s;
            }
        }
        let n = batches.len() as f64;
        let [total_l, cls, tcl, g_c, g_t, g] = acc.map(|a| a / n);
        log.push(FinetuneLogRecord {
            variant,
            epoch,
            step,
            lr,
            total: total_l,
            classification: cls,
            tcl: (variant != FinetuneVariant::BaselineCe).then_some(tcl),
            tcl_weight: lambda,
            grad_norm_classification: g_c,
            grad_norm_tcl: g_t,
            grad_norm_total: g,
            wall_time: clock.elapsed(),
        });
    }
    params.zero_grads();
    Ok(TrainOutcome { params, log })
}

/// Forward and reversed probabilities for every study and finding.
pub fn predict_both(
    clf: &Classifier,
    params: &ParamStore,
    data: &[PreparedStudy],
) -> Result<Vec<(Vec<ProbTriple>, Vec<ProbTriple>)>> {
    data.par_iter()
        .map(|s| Ok((clf.probs(params, &s.prev, &s.cur)?, clf.probs(params, &s.cur, &s.prev)?)))
        .collect()
}

pub fn finding_of(k: usize) -> Result<Finding> {
    Finding::ALL
        .get(k)
        .copied()
        .ok_or_else(|| Error::domain(format!("finding index {k} out of range")))
}
