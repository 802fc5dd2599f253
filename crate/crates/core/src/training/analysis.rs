//! Model-level measurements on prepared studies: protocol reports for the
//! supervised, zero-shot and retrieval classifiers, the swap-order
//! geometry of the pair embedding and probe features.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::finetune::{predict_both, Classifier};
use super::PreparedStudy;
use crate::encoders::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_protocols, ProtocolCase, ProtocolReport};
use crate::inference::{retrieval_probs, EncodedPromptBank};
use crate::numerics::ParamStore;
use crate::objectives::ProbTriple;
use crate::synthdata::{build_retrieval_variants, Finding, Lexicon};

/// Case `i` is fed as images `2i` (prev) and `2i + 1` (cur).
fn cases(data: &[PreparedStudy], k: usize) -> Vec<ProtocolCase<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| ProtocolCase {
            id: s.id.clone(),
            prev: 2 * i,
            cur: 2 * i + 1,
            label: s.labels[k],
        })
        .collect()
}

/// Evaluates all findings given precomputed forward and reversed
/// probabilities per study and finding.
pub fn report_from_probs(
    data: &[PreparedStudy],
    probs: &[(Vec<ProbTriple>, Vec<ProbTriple>)],
) -> Result<ProtocolReport> {
    if data.is_empty() {
        return Err(Error::domain("no studies to evaluate"));
    }
    let findings = data[0].labels.len();
    let mut per = BTreeMap::new();
    for k in 0..findings {
        let f = Finding::ALL[k];
        let r = evaluate_protocols(&cases(data, k), |a, b| {
            let (i, forward) = (a / 2, a % 2 == 0);
            if b / 2 != i {
                return Err(Error::domain("pair mixes two studies"));
            }
            let (fwd, bwd) = &probs[i];
            Ok(if forward { fwd[k] } else { bwd[k] })
        })?;
        per.insert(f.name().to_string(), r);
    }
    ProtocolReport::new(per)
}

pub fn supervised_report(clf: &Classifier, params: &ParamStore, data: &[PreparedStudy]) -> Result<ProtocolReport> {
    report_from_probs(data, &predict_both(clf, params, data)?)
}

fn pair_embeddings(
    encoder: &Encoder,
    params: &ParamStore,
    data: &[PreparedStudy],
) -> Result<Vec<(EmbeddingVector, EmbeddingVector)>> {
    data.par_iter()
        .map(|s| {
            Ok((
                EmbeddingVector::from_unit(encoder.pair_forward(params, &s.prev, &s.cur)?.embedding().to_vec())?,
                EmbeddingVector::from_unit(encoder.pair_forward(params, &s.cur, &s.prev)?.embedding().to_vec())?,
            ))
        })
        .collect()
}

pub fn zero_shot_report(
    encoder: &Encoder,
    params: &ParamStore,
    bank: &EncodedPromptBank,
    data: &[PreparedStudy],
) -> Result<ProtocolReport> {
    let emb = pair_embeddings(encoder, params, data)?;
    let findings = data.first().map_or(0, |s| s.labels.len());
    let probs = emb
        .iter()
        .map(|(f, b)| {
            let per = |v: &EmbeddingVector| -> Result<Vec<ProbTriple>> {
                (0..findings).map(|k| bank.classify(v, Finding::ALL[k])).collect()
            };
            Ok((per(f)?, per(b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_probs(data, &probs)
}

/// Retrieval-variant classification: each study's own report is rewritten
/// into three directional variants per finding and the pair embedding is
/// matched against them.
pub fn retrieval_report(
    encoder: &Encoder,
    params: &ParamStore,
    lexicon: &Lexicon,
    data: &[PreparedStudy],
) -> Result<ProtocolReport> {
    let emb = pair_embeddings(encoder, params, data)?;
    let findings = data.first().map_or(0, |s| s.labels.len());
    let probs = data
        .par_iter()
        .zip(&emb)
        .map(|(s, (f, b))| {
            let mut pf = Vec::with_capacity(findings);
            let mut pb = Vec::with_capacity(findings);
            for k in 0..findings {
                let variants = build_retrieval_variants(&s.report, Finding::ALL[k], lexicon)?
                    .iter()
                    .map(|t| encoder.encode_text(t, params))
                    .collect::<Result<Vec<_>>>()?;
                pf.push(retrieval_probs(f, &variants)?);
                pb.push(retrieval_probs(b, &variants)?);
            }
            Ok((pf, pb))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_probs(data, &probs)
}

/// Mean cosine between the reversed-order pair embedding and the report
/// embedding, split by ground-truth change flag.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwapGeometry {
    pub changed: f64,
    pub unchanged: f64,
}

impl SwapGeometry {
    /// `unchanged − changed`.
    pub fn margin(&self) -> f64 {
        self.unchanged - self.changed
    }
}

pub fn swap_geometry(encoder: &Encoder, params: &ParamStore, data: &[PreparedStudy]) -> Result<SwapGeometry> {
    let sims: Vec<(u8, f64)> = data
        .par_iter()
        .map(|s| {
            let v = encoder.pair_forward(params, &s.cur, &s.prev)?;
            let t = encoder.text_forward(params, &s.report)?;
            Ok((s.change, crate::numerics::dot(v.embedding(), t.embedding())))
        })
        .collect::<Result<_>>()?;
    let mean = |flag: u8| -> Result<f64> {
        let xs: Vec<f64> = sims.iter().filter(|(c, _)| *c == flag).map(|(_, s)| *s).collect();
        if xs.is_empty() {
            return Err(Error::domain(format!("no studies with change flag {flag}")));
        }
        Ok(xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Ok(SwapGeometry {
        changed: mean(1)?,
        unchanged: mean(0)?,
    })
}

/// Forward pair embeddings as probe features, with ground-truth flags.
pub fn probe_features(encoder: &Encoder, params: &ParamStore, data: &[PreparedStudy]) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let x = data
        .par_iter()
        .map(|s| Ok(encoder.pair_forward(params, &s.prev, &s.cur)?.embedding().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((x, data.iter().map(|s| s.change).collect()))
}
