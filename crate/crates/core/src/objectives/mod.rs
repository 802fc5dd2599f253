//! Training objectives and their analytic gradients.
//!
//! Pretraining uses the pairwise sigmoid contrastive loss on original-order
//! pairs plus a change-aware sigmoid loss on reversed pairs, where only a
//! matched report of a no-change study counts as a positive. Fine-tuning
//! uses bidirectional cross-entropy and the temporal consistency loss.
//!
//! Logit convention for both sigmoid heads: `logit = exp(log_scale)·v·t +
//! bias`, with the bias initialised at −10.

pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{swap_probs_unchecked, ProgressionLabel};
use crate::numerics::{
    dot, log_sigmoid_unchecked, sigmoid, softmax_backward, softmax_unchecked, Matrix, CE_FLOOR,
};

/// Learnable logit scalars of both heads and the fixed stage weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub log_scale: f64,
    pub bias: f64,
    pub swap_log_scale: f64,
    pub swap_bias: f64,
    /// `W`: weight of the change-aware term once active.
    pub change_weight: f64,
    /// `λ`: weight of the temporal consistency term once active.
    pub tcl_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            log_scale: 10f64.ln(),
            bias: -10.0,
            swap_log_scale: 10f64.ln(),
            swap_bias: -10.0,
            change_weight: 1.0,
            tcl_weight: 50.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("log_scale", self.log_scale),
            ("bias", self.bias),
            ("swap_log_scale", self.swap_log_scale),
            ("swap_bias", self.swap_bias),
        ] {
            if !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite")));
            }
        }
        if !(self.change_weight >= 0.0) {
            return Err(Error::domain("W must be non-negative"));
        }
        if !(self.tcl_weight >= 0.0) {
            return Err(Error::domain("λ must be non-negative"));
        }
        Ok(())
    }
}

/// Epochs (0-based) from which the inversion-aware terms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub change_activation_epoch: usize,
    pub tcl_activation_epoch: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            change_activation_epoch: 10,
            tcl_activation_epoch: 20,
        }
    }
}

impl StageSchedule {
    pub fn change_weight_at(&self, epoch: usize, weight: f64) -> f64 {
        if epoch >= self.change_activation_epoch {
            weight
        } else {
            0.0
        }
    }

    pub fn tcl_weight_at(&self, epoch: usize, weight: f64) -> f64 {
        if epoch >= self.tcl_activation_epoch {
            weight
        } else {
            0.0
        }
    }
}

/// Point on the simplex over (improved, stable, worsened).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbTriple([f64; 3]);

/// Tolerance on the simplex sum accepted by [`ProbTriple::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

impl ProbTriple {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::domain(format!("{p:?} has negative or non-finite entries")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain(format!("{p:?} sums to {sum}, not 1")));
        }
        Ok(ProbTriple(p))
    }

    pub(crate) fn new_unchecked(p: [f64; 3]) -> Self {
        ProbTriple(p)
    }

    pub fn uniform() -> Self {
        ProbTriple([1.0 / 3.0; 3])
    }

    pub fn from_logits(logits: &[f64; 3]) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(format!("non-finite logits {logits:?}")));
        }
        let p = softmax_unchecked(logits);
        Ok(ProbTriple([p[0], p[1], p[2]]))
    }

    pub fn as_array(&self) -> &[f64; 3] {
        &self.0
    }

    pub fn get(&self, label: ProgressionLabel) -> f64 {
        self.0[label.index()]
    }

    /// Most probable label.
    ///
    /// Ties that include `stable`, and exact ties between `improved` and
    /// `worsened`, resolve to `stable`. This rule commutes with inversion:
    /// `swap(p).argmax() == invert(p.argmax())` for every `p`.
    pub fn argmax(&self) -> ProgressionLabel {
        let [i, s, w] = self.0;
        if s >= i && s >= w {
            ProgressionLabel::Stable
        } else if i > w {
            ProgressionLabel::Improved
        } else if w > i {
            ProgressionLabel::Worsened
        } else {
            ProgressionLabel::Stable
        }
    }
}

/// Mini-batch of forward embeddings, reversed-order embeddings, report
/// embeddings and change flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub v: Matrix,
    pub v_swap: Matrix,
    pub t: Matrix,
    pub c: Vec<u8>,
}

const UNIT_TOL: f64 = 1e-9;

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        let n = dot(m.row(i), m.row(i)).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::domain(format!(
                "{what} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn check_pair(img: &Matrix, txt: &Matrix) -> Result<()> {
    if img.rows() != txt.rows() || img.cols() != txt.cols() {
        return Err(Error::domain(format!(
            "image batch {}x{} does not match text batch {}x{}",
            img.rows(),
            img.cols(),
            txt.rows(),
            txt.cols()
        )));
    }
    if img.rows() == 0 {
        return Err(Error::domain("empty batch"));
    }
    check_unit_rows(img, "image embedding")?;
    check_unit_rows(txt, "text embedding")
}

fn check_flags(c: &[u8], batch: usize) -> Result<()> {
    if c.len() != batch {
        return Err(Error::domain(format!(
            "{} change flags for a batch of {batch}",
            c.len()
        )));
    }
    if let Some(i) = c.iter().position(|&x| x > 1) {
        return Err(Error::domain(format!(
            "change flag {} at position {i} is not 0 or 1",
            c[i]
        )));
    }
    Ok(())
}

impl PretrainBatch {
    pub fn new(v: Matrix, v_swap: Matrix, t: Matrix, c: Vec<u8>) -> Result<Self> {
        check_pair(&v, &t)?;
        check_pair(&v_swap, &t)?;
        check_flags(&c, v.rows())?;
        Ok(PretrainBatch { v, v_swap, t, c })
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows() == 0
    }
}

/// Label of pair `(i, j)` in the base loss: positive on the diagonal.
pub fn base_sign(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        -1.0
    }
}

/// Label of pair `(i, j)` in the change-aware loss: positive only for a
/// study's own report when the study has no change.
pub fn change_sign(i: usize, j: usize, c_i: u8) -> f64 {
    if i == j && c_i == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Loss value and gradients of a pairwise sigmoid loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmoidLossGrad {
    pub loss: f64,
    pub d_img: Matrix,
    pub d_txt: Matrix,
    pub d_log_scale: f64,
    pub d_bias: f64,
}

/// `−(1/|B|) Σ_i Σ_j log σ(z_ij (exp(log_scale)·img_i·txt_j + bias))`.
fn pairwise_sigmoid(
    img: &Matrix,
    txt: &Matrix,
    log_scale: f64,
    bias: f64,
    sign: impl Fn(usize, usize) -> f64,
    with_grad: bool,
) -> SigmoidLossGrad {
    let b = img.rows();
    let scale = log_scale.exp();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut d_img = Matrix::zeros(if with_grad { b } else { 0 }, img.cols());
    let mut d_txt = Matrix::zeros(if with_grad { b } else { 0 }, img.cols());
    let (mut d_log_scale, mut d_bias) = (0.0, 0.0);
    for i in 0..b {
        let mut row_loss = 0.0;
        for j in 0..b {
            let z = sign(i, j);
            let d = dot(img.row(i), txt.row(j));
            let logit = scale * d + bias;
            row_loss -= log_sigmoid_unchecked(z * logit);
            if with_grad {
                // d/dlogit of −log σ(z·logit) = −z·σ(−z·logit)
                let g = -z * sigmoid(-z * logit) * inv_b;
                d_log_scale += g * scale * d;
                d_bias += g;
                let gs = g * scale;
                for (o, t) in d_img.row_mut(i).iter_mut().zip(txt.row(j)) {
                    *o += gs * t;
                }
                for (o, v) in d_txt.row_mut(j).iter_mut().zip(img.row(i)) {
                    *o += gs * v;
                }
            }
        }
        loss += row_loss;
    }
    SigmoidLossGrad {
        loss: loss * inv_b,
        d_img,
        d_txt,
        d_log_scale,
        d_bias,
    }
}

/// Base pairwise sigmoid loss on original-order pairs.
pub fn siglip_loss(v: &Matrix, t: &Matrix, params: &LossParams) -> Result<f64> {
    check_pair(v, t)?;
    Ok(pairwise_sigmoid(v, t, params.log_scale, params.bias, base_sign, false).loss)
}

pub fn siglip_loss_grad(v: &Matrix, t: &Matrix, params: &LossParams) -> Result<SigmoidLossGrad> {
    check_pair(v, t)?;
    Ok(pairwise_sigmoid(v, t, params.log_scale, params.bias, base_sign, true))
}

/// Change-aware sigmoid loss on reversed-order embeddings.
pub fn change_aware_loss(
    v_swap: &Matrix,
    t: &Matrix,
    c: &[u8],
    params: &LossParams,
) -> Result<f64> {
    check_pair(v_swap, t)?;
    check_flags(c, v_swap.rows())?;
    Ok(pairwise_sigmoid(
        v_swap,
        t,
        params.swap_log_scale,
        params.swap_bias,
        |i, j| change_sign(i, j, c[i]),
        false,
    )
    .loss)
}

pub fn change_aware_loss_grad(
    v_swap: &Matrix,
    t: &Matrix,
    c: &[u8],
    params: &LossParams,
) -> Result<SigmoidLossGrad> {
    check_pair(v_swap, t)?;
    check_flags(c, v_swap.rows())?;
    Ok(pairwise_sigmoid(
        v_swap,
        t,
        params.swap_log_scale,
        params.swap_bias,
        |i, j| change_sign(i, j, c[i]),
        true,
    ))
}

/// Components of the staged pretraining objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLoss {
    pub total: f64,
    pub siglip: SigmoidLossGrad,
    pub change: SigmoidLossGrad,
    /// `W` in effect at this epoch (zero before activation).
    pub change_weight: f64,
}

/// `L_siglip + W_eff · L_change`.
pub fn pretrain_total(
    batch: &PretrainBatch,
    params: &LossParams,
    epoch: usize,
    schedule: &StageSchedule,
) -> Result<f64> {
    let w = schedule.change_weight_at(epoch, params.change_weight);
    let base = siglip_loss(&batch.v, &batch.t, params)?;
    if w == 0.0 {
        return Ok(base);
    }
    Ok(base + w * change_aware_loss(&batch.v_swap, &batch.t, &batch.c, params)?)
}

/// Both components with gradients; the change-aware gradient is returned
/// unscaled and must be multiplied by `change_weight` when applied.
pub fn pretrain_total_grad(
    batch: &PretrainBatch,
    params: &LossParams,
    epoch: usize,
    schedule: &StageSchedule,
) -> Result<PretrainLoss> {
    let w = schedule.change_weight_at(epoch, params.change_weight);
    let siglip = siglip_loss_grad(&batch.v, &batch.t, params)?;
    let change = change_aware_loss_grad(&batch.v_swap, &batch.t, &batch.c, params)?;
    let total = if w == 0.0 {
        siglip.loss
    } else {
        siglip.loss + w * change.loss
    };
    Ok(PretrainLoss {
        total,
        siglip,
        change,
        change_weight: w,
    })
}

fn check_logits(l: &[f64; 3]) -> Result<()> {
    if l.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("non-finite logits {l:?}")))
    }
}

/// Cross-entropy of `softmax(logits)` against `y` and its logit gradient.
fn ce_with_grad(logits: &[f64; 3], y: ProgressionLabel) -> (f64, [f64; 3]) {
    let p = softmax_unchecked(logits);
    let py = p[y.index()];
    let loss = -py.max(CE_FLOOR).ln();
    let mut g = [0.0; 3];
    if py >= CE_FLOOR {
        for k in 0..3 {
            g[k] = p[k] - if k == y.index() { 1.0 } else { 0.0 };
        }
    }
    (loss, g)
}

/// Forward-order cross-entropy only; the fine-tuning baseline.
pub fn forward_ce_loss(logits_fwd: &[f64; 3], y: ProgressionLabel) -> Result<f64> {
    check_logits(logits_fwd)?;
    Ok(ce_with_grad(logits_fwd, y).0)
}

pub fn forward_ce_grad(logits_fwd: &[f64; 3], y: ProgressionLabel) -> Result<(f64, [f64; 3])> {
    check_logits(logits_fwd)?;
    Ok(ce_with_grad(logits_fwd, y))
}

/// `½[CE(softmax(fwd), y) + CE(softmax(bwd), I(y))]`.
pub fn bice_loss(logits_fwd: &[f64; 3], logits_bwd: &[f64; 3], y: ProgressionLabel) -> Result<f64> {
    Ok(bice_grad(logits_fwd, logits_bwd, y)?.0)
}

pub fn bice_grad(
    logits_fwd: &[f64; 3],
    logits_bwd: &[f64; 3],
    y: ProgressionLabel,
) -> Result<(f64, [f64; 3], [f64; 3])> {
    check_logits(logits_fwd)?;
    check_logits(logits_bwd)?;
    let (lf, gf) = ce_with_grad(logits_fwd, y);
    let (lb, gb) = ce_with_grad(logits_bwd, y.inverted());
    Ok((
        0.5 * (lf + lb),
        gf.map(|g| 0.5 * g),
        gb.map(|g| 0.5 * g),
    ))
}

fn check_tcl_inputs(p_fwd: &[ProbTriple], p_bwd: &[ProbTriple]) -> Result<()> {
    if p_fwd.len() != p_bwd.len() {
        return Err(Error::domain(format!(
            "{} forward rows vs {} reversed rows",
            p_fwd.len(),
            p_bwd.len()
        )));
    }
    if p_fwd.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(())
}

/// Mean squared distance between forward probabilities and the swapped
/// reversed probabilities.
pub fn tcl_loss(p_fwd: &[ProbTriple], p_bwd: &[ProbTriple]) -> Result<f64> {
    check_tcl_inputs(p_fwd, p_bwd)?;
    let sum: f64 = p_fwd
        .iter()
        .zip(p_bwd)
        .map(|(f, b)| {
            let s = swap_probs_unchecked(b);
            (0..3).map(|k| (f.0[k] - s.0[k]).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(sum / p_fwd.len() as f64)
}

/// TCL value with gradients with respect to both probability batches.
pub fn tcl_grad(
    p_fwd: &[ProbTriple],
    p_bwd: &[ProbTriple],
) -> Result<(f64, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let loss = tcl_loss(p_fwd, p_bwd)?;
    let scale = 2.0 / p_fwd.len() as f64;
    let mut d_fwd = Vec::with_capacity(p_fwd.len());
    let mut d_bwd = Vec::with_capacity(p_fwd.len());
    for (f, b) in p_fwd.iter().zip(p_bwd) {
        let s = swap_probs_unchecked(b);
        let r: [f64; 3] = std::array::from_fn(|k| scale * (f.0[k] - s.0[k]));
        d_fwd.push(r);
        // S is a symmetric permutation, so Sᵀ r = S r.
        d_bwd.push([-r[2], -r[1], -r[0]]);
    }
    Ok((loss, d_fwd, d_bwd))
}

/// Components of the staged fine-tuning objective over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLoss {
    pub total: f64,
    pub bice: f64,
    pub tcl: f64,
    /// `λ` in effect at this epoch (zero before activation).
    pub tcl_weight: f64,
    pub d_fwd: Vec<[f64; 3]>,
    pub d_bwd: Vec<[f64; 3]>,
}

fn check_finetune_batch(
    logits_fwd: &[[f64; 3]],
    logits_bwd: &[[f64; 3]],
    y: &[ProgressionLabel],
) -> Result<()> {
    if logits_fwd.len() != logits_bwd.len() || logits_fwd.len() != y.len() {
        return Err(Error::domain(format!(
            "batch size mismatch: {} forward, {} reversed, {} labels",
            logits_fwd.len(),
            logits_bwd.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(())
}

/// `mean BiCE + λ_eff · TCL` over a batch of logit pairs.
pub fn finetune_total(
    logits_fwd: &[[f64; 3]],
    logits_bwd: &[[f64; 3]],
    y: &[ProgressionLabel],
    params: &LossParams,
    epoch: usize,
    schedule: &StageSchedule,
) -> Result<f64> {
    Ok(finetune_total_grad(logits_fwd, logits_bwd, y, params, epoch, schedule)?.total)
}

pub fn finetune_total_grad(
    logits_fwd: &[[f64; 3]],
    logits_bwd: &[[f64; 3]],
    y: &[ProgressionLabel],
    params: &LossParams,
    epoch: usize,
    schedule: &StageSchedule,
) -> Result<FinetuneLoss> {
    check_finetune_batch(logits_fwd, logits_bwd, y)?;
    let n = y.len() as f64;
    let mut bice = 0.0;
    let mut d_fwd = Vec::with_capacity(y.len());
    let mut d_bwd = Vec::with_capacity(y.len());
    let mut p_fwd = Vec::with_capacity(y.len());
    let mut p_bwd = Vec::with_capacity(y.len());
    for ((lf, lb), &label) in logits_fwd.iter().zip(logits_bwd).zip(y) {
        let (l, gf, gb) = bice_grad(lf, lb, label)?;
        bice += l;
        d_fwd.push(gf.map(|g| g / n));
        d_bwd.push(gb.map(|g| g / n));
        p_fwd.push(ProbTriple::from_logits(lf)?);
        p_bwd.push(ProbTriple::from_logits(lb)?);
    }
    bice /= n;
    let lambda = schedule.tcl_weight_at(epoch, params.tcl_weight);
    let (tcl, dp_fwd, dp_bwd) = tcl_grad(&p_fwd, &p_bwd)?;
    let total = if lambda == 0.0 { bice } else { bice + lambda * tcl };
    if lambda != 0.0 {
        for i in 0..y.len() {
            let gf = softmax_backward(&p_fwd[i].0, &dp_fwd[i]);
            let gb = softmax_backward(&p_bwd[i].0, &dp_bwd[i]);
            for k in 0..3 {
                d_fwd[i][k] += lambda * gf[k];
                d_bwd[i][k] += lambda * gb[k];
            }
        }
    }
    Ok(FinetuneLoss {
        total,
        bice,
        tcl,
        tcl_weight: lambda,
        d_fwd,
        d_bwd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::swap_probs;
    use crate::numerics::{normalize, rng_from};
    use proptest::prelude::*;
    use rand::Rng;
    use ProgressionLabel::*;

    fn unit_params(scale: f64, bias: f64) -> LossParams {
        LossParams {
            log_scale: scale.ln(),
            bias,
            swap_log_scale: scale.ln(),
            swap_bias: bias,
            ..LossParams::default()
        }
    }

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Scalar double loop written directly from the case analysis.
    fn oracle(img: &Matrix, txt: &Matrix, c: Option<&[u8]>, log_scale: f64, bias: f64) -> f64 {
        let b = img.rows();
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                let positive = match c {
                    None => i == j,
                    Some(c) => i == j && c[i] == 0,
                };
                let z = if positive { 1.0 } else { -1.0 };
                let mut d = 0.0;
                for k in 0..img.cols() {
                    d += img.get(i, k) * txt.get(j, k);
                }
                let x = z * (log_scale.exp() * d + bias);
                total += (1.0 + (-x).exp()).ln();
            }
        }
        total / b as f64
    }

    #[test]
    fn siglip_examples() {
        let p = unit_params(1.0, 0.0);
        let one = siglip_loss(&m(&[[1.0, 0.0]]), &m(&[[0.0, 1.0]]), &p).unwrap();
        assert!((one - 2f64.ln()).abs() < 1e-15);
        let v = m(&[[1.0, 0.0], [1.0, 0.0]]);
        let t = m(&[[0.0, 1.0], [0.0, 1.0]]);
        let two = siglip_loss(&v, &t, &p).unwrap();
        assert!((two - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((two - oracle(&v, &t, None, 0.0, 0.0)).abs() < 1e-15);

        let aligned = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let hp = unit_params(10.0, -10.0);
        let good = siglip_loss(&aligned, &aligned, &hp).unwrap();
        let zero = siglip_loss(&v, &t, &hp).unwrap();
        assert!(good < zero, "{good} vs {zero}");
    }

    #[test]
    fn change_aware_examples() {
        let p = unit_params(1.0, 0.0);
        let v = m(&[[1.0, 0.0]]);
        let t = m(&[[0.0, 1.0]]);
        assert!((change_aware_loss(&v, &t, &[0], &p).unwrap() - 2f64.ln()).abs() < 1e-15);
        let s = 2.0;
        let t2 = m(&[[1.0, 0.0]]);
        let hp = unit_params(s, 0.0);
        let got = change_aware_loss(&v, &t2, &[1], &hp).unwrap();
        assert!((got - 2.126_928_011_042_972_7).abs() < 1e-12, "{got}");
        let v2 = m(&[[1.0, 0.0], [1.0, 0.0]]);
        let t3 = m(&[[0.0, 1.0], [0.0, 1.0]]);
        let two = change_aware_loss(&v2, &t3, &[0, 1], &p).unwrap();
        assert!((two - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(change_aware_loss(&v2, &t3, &[0, 2], &p).is_err());
        assert!(change_aware_loss(&v2, &t3, &[0], &p).is_err());
    }

    #[test]
    fn rejects_non_unit_rows() {
        let p = LossParams::default();
        let v = m(&[[2.0, 0.0]]);
        assert!(siglip_loss(&v, &v, &p).is_err());
    }

    #[test]
    fn pretrain_staging() {
        let p = unit_params(1.0, 0.0);
        let v = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let vs = m(&[[0.6, 0.8], [0.8, -0.6]]);
        let t = m(&[[0.0, 1.0], [1.0, 0.0]]);
        let batch = PretrainBatch::new(v.clone(), vs.clone(), t.clone(), vec![0, 1]).unwrap();
        let sched = StageSchedule::default();
        let base = siglip_loss(&v, &t, &p).unwrap();
        let change = change_aware_loss(&vs, &t, &[0, 1], &p).unwrap();
        assert_eq!(pretrain_total(&batch, &p, 5, &sched).unwrap(), base);
        let w0 = LossParams {
            change_weight: 0.0,
            ..p.clone()
        };
        assert_eq!(pretrain_total(&batch, &w0, 10, &sched).unwrap(), base);
        let sum = pretrain_total(&batch, &p, 20, &sched).unwrap();
        let want = oracle(&v, &t, None, 0.0, 0.0) + oracle(&vs, &t, Some(&[0, 1]), 0.0, 0.0);
        assert!((sum - want).abs() < 1e-14);
        assert!((sum - (base + change)).abs() < 1e-15);
        // Activation boundary: epoch index 9 is the tenth epoch.
        assert_eq!(pretrain_total(&batch, &p, 9, &sched).unwrap(), base);
    }

    #[test]
    fn bice_examples() {
        for y in ProgressionLabel::ALL {
            let l = bice_loss(&[0.0; 3], &[0.0; 3], y).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
        let mut fwd = [0.0; 3];
        fwd[Improved.index()] = 60.0;
        let mut bwd = [0.0; 3];
        bwd[Worsened.index()] = 60.0;
        assert!(bice_loss(&fwd, &bwd, Improved).unwrap() < 1e-20);
        let e2 = 2f64.exp();
        let l = bice_loss(&[0.0, 2.0, 0.0], &[0.0, 2.0, 0.0], Stable).unwrap();
        assert!((l + (e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
        assert!((l - 0.239_544_766_221_884_5).abs() < 1e-12, "{l}");
        assert!(bice_loss(&[f64::NAN, 0.0, 0.0], &[0.0; 3], Stable).is_err());
    }

    #[test]
    fn tcl_examples() {
        let pt = |a: [f64; 3]| ProbTriple::new(a).unwrap();
        let fwd = [pt([0.2, 0.5, 0.3])];
        assert_eq!(tcl_loss(&fwd, &[pt([0.3, 0.5, 0.2])]).unwrap(), 0.0);
        assert_eq!(tcl_loss(&[pt([1.0, 0.0, 0.0])], &[pt([1.0, 0.0, 0.0])]).unwrap(), 2.0);
        let b = pt([0.1, 0.6, 0.3]);
        let mirrored = swap_probs(&b).unwrap();
        assert_eq!(tcl_loss(&[mirrored], &[b]).unwrap(), 0.0);
        assert!(tcl_loss(&fwd, &[]).is_err());
    }

    #[test]
    fn finetune_staging() {
        let sched = StageSchedule::default();
        let p = LossParams::default();
        let lf = [[0.3, -1.0, 0.8], [1.2, 0.1, -0.4]];
        let lb = [[0.5, 0.2, -0.3], [-0.2, 0.9, 0.0]];
        let y = [Worsened, Stable];
        let bice_mean = (bice_loss(&lf[0], &lb[0], y[0]).unwrap()
            + bice_loss(&lf[1], &lb[1], y[1]).unwrap())
            / 2.0;
        assert_eq!(finetune_total(&lf, &lb, &y, &p, 19, &sched).unwrap(), bice_mean);
        let l0 = LossParams {
            tcl_weight: 0.0,
            ..p.clone()
        };
        assert_eq!(finetune_total(&lf, &lb, &y, &l0, 40, &sched).unwrap(), bice_mean);
        let mirrored_b = [[-0.4, 0.1, 1.2], [0.8, -1.0, 0.3]];
        let lf2 = [lf[1], lf[0]];
        let at30 = finetune_total(&lf2, &mirrored_b, &y, &p, 30, &sched).unwrap();
        let bice2 = (bice_loss(&lf2[0], &mirrored_b[0], y[0]).unwrap()
            + bice_loss(&lf2[1], &mirrored_b[1], y[1]).unwrap())
            / 2.0;
        assert!((at30 - bice2).abs() < 1e-12);
        let with = finetune_total(&lf, &lb, &y, &p, 30, &sched).unwrap();
        assert!(with > bice_mean);
    }

    #[test]
    fn change_loss_monotone_in_matched_dot() {
        let p = LossParams::default();
        let t = m(&[[1.0, 0.0]]);
        let mut prev_nc = f64::INFINITY;
        let mut prev_c = f64::NEG_INFINITY;
        for k in 0..=40 {
            let angle = std::f64::consts::PI * (1.0 - k as f64 / 40.0);
            let v = m(&[[angle.cos(), angle.sin()]]);
            let nc = change_aware_loss(&v, &t, &[0], &p).unwrap();
            let ch = change_aware_loss(&v, &t, &[1], &p).unwrap();
            assert!(nc < prev_nc, "no-change loss must fall as the dot rises");
            assert!(ch > prev_c, "change loss must rise as the dot rises");
            prev_nc = nc;
            prev_c = ch;
        }
    }

    fn random_unit_rows(rng: &mut impl Rng, b: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&raw).unwrap().0
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn sign_matrix_audit() {
        let mut rng = rng_from(17);
        for _ in 0..50 {
            let b = rng.gen_range(1..7);
            let c: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            for i in 0..b {
                for j in 0..b {
                    let expected = if i == j && c[i] == 0 { 1.0 } else { -1.0 };
                    assert_eq!(change_sign(i, j, c[i]), expected);
                    assert_eq!(base_sign(i, j), if i == j { 1.0 } else { -1.0 });
                }
            }
        }
    }

    #[test]
    fn losses_match_scalar_oracle() {
        let mut rng = rng_from(23);
        for _ in 0..100 {
            let b = rng.gen_range(1..5);
            let v = random_unit_rows(&mut rng, b, 3);
            let t = random_unit_rows(&mut rng, b, 3);
            let c: Vec<u8> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let p = LossParams {
                log_scale: rng.gen_range(-1.0..3.0),
                bias: rng.gen_range(-12.0..4.0),
                swap_log_scale: rng.gen_range(-1.0..3.0),
                swap_bias: rng.gen_range(-12.0..4.0),
                ..LossParams::default()
            };
            let got = siglip_loss(&v, &t, &p).unwrap();
            assert!((got - oracle(&v, &t, None, p.log_scale, p.bias)).abs() < 1e-10);
            let got = change_aware_loss(&v, &t, &c, &p).unwrap();
            let want = oracle(&v, &t, Some(&c), p.swap_log_scale, p.swap_bias);
            assert!((got - want).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn tcl_nonnegative_and_zero_iff_mirrored(
            a in proptest::array::uniform3(-5.0f64..5.0),
            b in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let f = ProbTriple::from_logits(&a).unwrap();
            let r = ProbTriple::from_logits(&b).unwrap();
            let v = tcl_loss(&[f], &[r]).unwrap();
            prop_assert!(v >= 0.0);
            let mirrored = swap_probs(&f).unwrap();
            prop_assert!(tcl_loss(&[f], &[mirrored]).unwrap() <= 1e-12);
            let differs = f.as_array().iter().zip(swap_probs(&r).unwrap().as_array())
                .any(|(x, y)| (x - y).abs() > 1e-6);
            if differs {
                prop_assert!(v > 0.0);
            }
        }
    }
}
