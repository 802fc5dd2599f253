//! Finite-difference certification of every objective.
//!
//! Each objective is wrapped so that all of its inputs live in a
//! [`ParamStore`]: embedding rows are stored unnormalised and normalised
//! inside the loss (so perturbations never break the unit-norm contract),
//! probabilities are stored as logits, and the learnable log-scales and
//! biases are stored directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    bice_grad, change_aware_loss_grad, finetune_total_grad, pretrain_total_grad,
    siglip_loss_grad, tcl_grad, LossParams, PretrainBatch, ProbTriple, SigmoidLossGrad,
    StageSchedule,
};
use crate::error::Result;
use crate::inference::ProgressionLabel;
use crate::numerics::{
    fd_check, mix_seed, normalize, normalize_backward, rng_from, softmax_backward, FdOptions,
    FdReport, Matrix, Objective, ParamStore,
};

/// Which loss a [`LossObjective`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Siglip,
    ChangeAware,
    PretrainTotal,
    Bice,
    Tcl,
    FinetuneTotal,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Siglip,
        LossKind::ChangeAware,
        LossKind::PretrainTotal,
        LossKind::Bice,
        LossKind::Tcl,
        LossKind::FinetuneTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Siglip => "siglip",
            LossKind::ChangeAware => "change_aware",
            LossKind::PretrainTotal => "pretrain_total",
            LossKind::Bice => "bice",
            LossKind::Tcl => "tcl",
            LossKind::FinetuneTotal => "finetune_total",
        }
    }
}

/// One objective at one random setting, with its inputs in a store.
pub struct LossObjective {
    kind: LossKind,
    batch: usize,
    dim: usize,
    flags: Vec<u8>,
    labels: Vec<ProgressionLabel>,
    weights: LossParams,
    epoch: usize,
    schedule: StageSchedule,
}

const IMG: &str = "img";
const IMG_SWAP: &str = "img_swap";
const TXT: &str = "txt";
const LOG_SCALE: &str = "log_scale";
const BIAS: &str = "bias";
const SWAP_LOG_SCALE: &str = "swap_log_scale";
const SWAP_BIAS: &str = "swap_bias";
const FWD: &str = "logits_fwd";
const BWD: &str = "logits_bwd";

impl LossObjective {
    /// Draws a random batch and parameter setting for `kind`.
    ///
    /// Batches have 2–4 rows in 3–6 dimensions; both flag values and all
    /// three labels are forced to appear where the batch allows it.
    pub fn random(kind: LossKind, seed: u64) -> Result<(Self, ParamStore)> {
        let mut rng = rng_from(seed);
        let batch = rng.gen_range(2..=4);
        let dim = rng.gen_range(3..=6);
        let mut flags: Vec<u8> = (0..batch).map(|_| rng.gen_range(0..2)).collect();
        flags[0] = 0;
        flags[1] = 1;
        let labels: Vec<ProgressionLabel> = (0..batch)
            .map(|i| ProgressionLabel::ALL[(i + rng.gen_range(0..3)) % 3])
            .collect();
        let mut store = ParamStore::new();
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
        };
        match kind {
            LossKind::Siglip | LossKind::ChangeAware | LossKind::PretrainTotal => {
                store.insert(IMG, batch, dim, gauss(batch * dim, 1.0))?;
                store.insert(IMG_SWAP, batch, dim, gauss(batch * dim, 1.0))?;
                store.insert(TXT, batch, dim, gauss(batch * dim, 1.0))?;
                let s = gauss(4, 1.0);
                store.insert(LOG_SCALE, 1, 1, vec![1.0 + s[0]])?;
                store.insert(BIAS, 1, 1, vec![3.0 * s[1]])?;
                store.insert(SWAP_LOG_SCALE, 1, 1, vec![1.0 + s[2]])?;
                store.insert(SWAP_BIAS, 1, 1, vec![3.0 * s[3]])?;
            }
            LossKind::Bice | LossKind::Tcl | LossKind::FinetuneTotal => {
                store.insert(FWD, batch, 3, gauss(batch * 3, 2.0))?;
                store.insert(BWD, batch, 3, gauss(batch * 3, 2.0))?;
            }
        }
        let objective = LossObjective {
            kind,
            batch,
            dim,
            flags,
            labels,
            weights: LossParams::default(),
            // Past both activation epochs so every term contributes.
            epoch: 25,
            schedule: StageSchedule::default(),
        };
        Ok((objective, store))
    }

    fn unit_rows(&self, params: &ParamStore, name: &str) -> Result<(Matrix, Vec<f64>)> {
        let raw = params.value(params.id(name)?);
        let mut rows = Vec::with_capacity(self.batch);
        let mut norms = Vec::with_capacity(self.batch);
        for i in 0..self.batch {
            let (v, n) = normalize(&raw[i * self.dim..(i + 1) * self.dim])?;
            rows.push(v);
            norms.push(n);
        }
        Ok((Matrix::from_rows(&rows)?, norms))
    }

    fn loss_params(&self, params: &ParamStore) -> Result<LossParams> {
        let get = |n: &str| -> Result<f64> { Ok(params.scalar(params.id(n)?)) };
        Ok(LossParams {
            log_scale: get(LOG_SCALE)?,
            bias: get(BIAS)?,
            swap_log_scale: get(SWAP_LOG_SCALE)?,
            swap_bias: get(SWAP_BIAS)?,
            ..self.weights.clone()
        })
    }

    fn logits(&self, params: &ParamStore, name: &str) -> Result<Vec<[f64; 3]>> {
        let raw = params.value(params.id(name)?);
        Ok((0..self.batch)
            .map(|i| [raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]])
            .collect())
    }

    fn push_row_grads(
        params: &mut ParamStore,
        name: &str,
        unit: &Matrix,
        norms: &[f64],
        d_unit: &Matrix,
        weight: f64,
    ) -> Result<()> {
        let id = params.id(name)?;
        let dim = unit.cols();
        let g = params.grad_mut(id);
        for (i, norm) in norms.iter().enumerate() {
            let d = normalize_backward(unit.row(i), *norm, d_unit.row(i));
            for (o, x) in g[i * dim..(i + 1) * dim].iter_mut().zip(d) {
                *o += weight * x;
            }
        }
        Ok(())
    }

    fn push_head_grads(
        params: &mut ParamStore,
        g: &SigmoidLossGrad,
        scale_name: &str,
        bias_name: &str,
        weight: f64,
    ) -> Result<()> {
        let s = params.id(scale_name)?;
        params.grad_mut(s)[0] += weight * g.d_log_scale;
        let b = params.id(bias_name)?;
        params.grad_mut(b)[0] += weight * g.d_bias;
        Ok(())
    }

    fn evaluate(&self, params: &mut ParamStore, with_grad: bool) -> Result<f64> {
        match self.kind {
            LossKind::Siglip | LossKind::ChangeAware | LossKind::PretrainTotal => {
                let (v, nv) = self.unit_rows(params, IMG)?;
                let (vs, nvs) = self.unit_rows(params, IMG_SWAP)?;
                let (t, nt) = self.unit_rows(params, TXT)?;
                let lp = self.loss_params(params)?;
                let (loss, base_w, change_w, base, change) = match self.kind {
                    LossKind::Siglip => {
                        let g = siglip_loss_grad(&v, &t, &lp)?;
                        (g.loss, 1.0, 0.0, Some(g), None)
                    }
                    LossKind::ChangeAware => {
                        let g = change_aware_loss_grad(&vs, &t, &self.flags, &lp)?;
                        (g.loss, 0.0, 1.0, None, Some(g))
                    }
                    _ => {
                        let batch = PretrainBatch::new(v.clone(), vs.clone(), t.clone(), self.flags.clone())?;
                        let g = pretrain_total_grad(&batch, &lp, self.epoch, &self.schedule)?;
                        (g.total, 1.0, g.change_weight, Some(g.siglip), Some(g.change))
                    }
                };
                if with_grad {
                    if let Some(g) = &base {
                        Self::push_row_grads(params, IMG, &v, &nv, &g.d_img, base_w)?;
                        Self::push_row_grads(params, TXT, &t, &nt, &g.d_txt, base_w)?;
                        Self::push_head_grads(params, g, LOG_SCALE, BIAS, base_w)?;
                    }
                    if let Some(g) = &change {
                        Self::push_row_grads(params, IMG_SWAP, &vs, &nvs, &g.d_img, change_w)?;
                        Self::push_row_grads(params, TXT, &t, &nt, &g.d_txt, change_w)?;
                        Self::push_head_grads(params, g, SWAP_LOG_SCALE, SWAP_BIAS, change_w)?;
                    }
                }
                Ok(loss)
            }
            LossKind::Bice => {
                let lf = self.logits(params, FWD)?;
                let lb = self.logits(params, BWD)?;
                let mut loss = 0.0;
                let mut gf = Vec::new();
                let mut gb = Vec::new();
                for i in 0..self.batch {
                    let (l, f, b) = bice_grad(&lf[i], &lb[i], self.labels[i])?;
                    loss += l;
                    gf.push(f);
                    gb.push(b);
                }
                if with_grad {
                    self.push_logit_grads(params, &gf, &gb)?;
                }
                Ok(loss)
            }
            LossKind::Tcl => {
                let lf = self.logits(params, FWD)?;
                let lb = self.logits(params, BWD)?;
                let pf: Vec<ProbTriple> = lf.iter().map(ProbTriple::from_logits).collect::<Result<_>>()?;
                let pb: Vec<ProbTriple> = lb.iter().map(ProbTriple::from_logits).collect::<Result<_>>()?;
                let (loss, dpf, dpb) = tcl_grad(&pf, &pb)?;
                if with_grad {
                    let to_logits = |p: &[ProbTriple], d: &[[f64; 3]]| -> Vec<[f64; 3]> {
                        p.iter()
                            .zip(d)
                            .map(|(p, d)| {
                                let g = softmax_backward(p.as_array(), d);
                                [g[0], g[1], g[2]]
                            })
                            .collect()
                    };
                    self.push_logit_grads(params, &to_logits(&pf, &dpf), &to_logits(&pb, &dpb))?;
                }
                Ok(loss)
            }
            LossKind::FinetuneTotal => {
                let lf = self.logits(params, FWD)?;
                let lb = self.logits(params, BWD)?;
                let g = finetune_total_grad(&lf, &lb, &self.labels, &self.weights, self.epoch, &self.schedule)?;
                if with_grad {
                    self.push_logit_grads(params, &g.d_fwd, &g.d_bwd)?;
                }
                Ok(g.total)
            }
        }
    }

    fn push_logit_grads(
        &self,
        params: &mut ParamStore,
        d_fwd: &[[f64; 3]],
        d_bwd: &[[f64; 3]],
    ) -> Result<()> {
        for (name, d) in [(FWD, d_fwd), (BWD, d_bwd)] {
            let id = params.id(name)?;
            let g = params.grad_mut(id);
            for (i, row) in d.iter().enumerate() {
                for k in 0..3 {
                    g[3 * i + k] += row[k];
                }
            }
        }
        Ok(())
    }
}

impl Objective for LossObjective {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut scratch = params.clone();
        self.evaluate(&mut scratch, false)
    }

    fn loss_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        self.evaluate(params, true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFdReport {
    pub loss: LossKind,
    pub setting: usize,
    pub seed: u64,
    pub report: FdReport,
}

/// Checks all six objectives at `settings` random settings each.
pub fn check_all_objectives(
    seed: u64,
    settings: usize,
    opts: &FdOptions,
) -> Result<Vec<NamedFdReport>> {
    let mut out = Vec::new();
    for (k, kind) in LossKind::ALL.iter().enumerate() {
        for s in 0..settings {
            let item_seed = mix_seed(mix_seed(seed, k as u64), s as u64);
            let (obj, params) = LossObjective::random(*kind, item_seed)?;
            out.push(NamedFdReport {
                loss: *kind,
                setting: s,
                seed: item_seed,
                report: fd_check(&obj, &params, opts)?,
            });
        }
    }
    Ok(out)
}
