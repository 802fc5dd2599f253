//! Inversion maps, inversion-aware score fusion and embedding-based
//! classifiers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingVector, Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{softmax_unchecked, ParamStore};
use crate::objectives::{ProbTriple, SIMPLEX_TOL};
use crate::synthdata::{Finding, Lexicon};

/// Progression of one finding between two studies. Discriminants are the
/// probability indices used throughout (0 improved, 1 stable, 2 worsened).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgressionLabel {
    Improved = 0,
    Stable = 1,
    Worsened = 2,
}

impl ProgressionLabel {
    pub const ALL: [ProgressionLabel; 3] = [
        ProgressionLabel::Improved,
        ProgressionLabel::Stable,
        ProgressionLabel::Worsened,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain(format!("invalid progression label index {i}")))
    }

    pub fn inverted(self) -> Self {
        invert_label(self)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProgressionLabel::Improved => "improved",
            ProgressionLabel::Stable => "stable",
            ProgressionLabel::Worsened => "worsened",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "improved" => Ok(ProgressionLabel::Improved),
            "stable" => Ok(ProgressionLabel::Stable),
            "worsened" => Ok(ProgressionLabel::Worsened),
            other => Err(Error::domain(format!("unknown progression label {other:?}"))),
        }
    }
}

impl fmt::Display for ProgressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// improved ↔ worsened; stable is fixed.
pub fn invert_label(y: ProgressionLabel) -> ProgressionLabel {
    match y {
        ProgressionLabel::Improved => ProgressionLabel::Worsened,
        ProgressionLabel::Stable => ProgressionLabel::Stable,
        ProgressionLabel::Worsened => ProgressionLabel::Improved,
    }
}

fn check_simplex(p: &ProbTriple) -> Result<()> {
    let a = p.as_array();
    let sum: f64 = a.iter().sum();
    if a.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(format!("{a:?} is not on the probability simplex")));
    }
    Ok(())
}

/// Exchanges the improved and worsened probabilities.
pub fn swap_probs(p: &ProbTriple) -> Result<ProbTriple> {
    check_simplex(p)?;
    Ok(swap_probs_unchecked(p))
}

pub(crate) fn swap_probs_unchecked(p: &ProbTriple) -> ProbTriple {
    let [a, b, c] = *p.as_array();
    ProbTriple::new_unchecked([c, b, a])
}

/// `½[p_fwd + S(p_bwd)]`.
pub fn combined_score(p_fwd: &ProbTriple, p_bwd: &ProbTriple) -> Result<ProbTriple> {
    check_simplex(p_fwd)?;
    let s = swap_probs(p_bwd)?;
    let f = p_fwd.as_array();
    let s = s.as_array();
    Ok(ProbTriple::new_unchecked(std::array::from_fn(|k| {
        0.5 * (f[k] + s[k])
    })))
}

/// Per finding, per progression class, a list of prompt token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    prompts: BTreeMap<Finding, [Vec<TokenSequence>; 3]>,
}

/// On-disk form: finding → class → prompt strings.
type PromptText = BTreeMap<String, BTreeMap<String, Vec<String>>>;

impl PromptBank {
    pub fn new(prompts: BTreeMap<Finding, [Vec<TokenSequence>; 3]>) -> Result<Self> {
        for (finding, classes) in &prompts {
            for (k, list) in classes.iter().enumerate() {
                if list.is_empty() {
                    return Err(Error::domain(format!(
                        "no prompts for {finding} / {}",
                        ProgressionLabel::ALL[k]
                    )));
                }
                for (a, p) in list.iter().enumerate() {
                    if list[..a].contains(p) {
                        return Err(Error::domain(format!(
                            "duplicate prompt for {finding} / {}",
                            ProgressionLabel::ALL[k]
                        )));
                    }
                }
            }
        }
        Ok(PromptBank { prompts })
    }

    /// Templated prompts phrased with the report vocabulary, four per class.
    pub fn templated(lexicon: &Lexicon) -> Result<Self> {
        let patterns: [&[&str]; 3] = [
            &["{f} is improved", "improved {f}", "{f} is resolved", "{f} improved"],
            &["{f} is stable", "stable {f}", "{f} is present", "{f} stable"],
            &["{f} is worsened", "worsened {f}", "{f} is new", "new {f}"],
        ];
        let mut prompts = BTreeMap::new();
        for finding in Finding::ALL {
            let classes: [Vec<TokenSequence>; 3] = std::array::from_fn(|k| {
                patterns[k]
                    .iter()
                    .map(|p| lexicon.tokenize(&p.replace("{f}", finding.name())))
                    .collect::<Result<Vec<_>>>()
            })
            .map(|r| r.expect("templated prompts use lexicon words"));
            prompts.insert(finding, classes);
        }
        PromptBank::new(prompts)
    }

    pub fn classes(&self, finding: Finding) -> Result<&[Vec<TokenSequence>; 3]> {
        self.prompts
            .get(&finding)
            .ok_or_else(|| Error::domain(format!("prompt bank has no entry for {finding}")))
    }

    pub fn findings(&self) -> impl Iterator<Item = Finding> + '_ {
        self.prompts.keys().copied()
    }

    pub fn to_text(&self, lexicon: &Lexicon) -> String {
        let mut out: PromptText = BTreeMap::new();
        for (finding, classes) in &self.prompts {
            let entry = out.entry(finding.name().to_owned()).or_default();
            for (k, list) in classes.iter().enumerate() {
                entry.insert(
                    ProgressionLabel::ALL[k].name().to_owned(),
                    list.iter().map(|t| lexicon.detokenize(t)).collect(),
                );
            }
        }
        serde_json::to_string_pretty(&out).expect("prompt bank serialises")
    }

    pub fn from_text(text: &str, lexicon: &Lexicon) -> Result<Self> {
        let raw: PromptText = serde_json::from_str(text)
            .map_err(|e| Error::domain(format!("prompt bank: {e}")))?;
        let mut prompts = BTreeMap::new();
        for (name, classes) in raw {
            let finding = Finding::parse(&name)?;
            let mut lists: [Vec<TokenSequence>; 3] = Default::default();
            for (class, list) in classes {
                let label = ProgressionLabel::parse(&class)?;
                lists[label.index()] = list
                    .iter()
                    .map(|s| lexicon.tokenize(s))
                    .collect::<Result<_>>()?;
            }
            prompts.insert(finding, lists);
        }
        PromptBank::new(prompts)
    }

    pub fn encode(&self, encoder: &Encoder, params: &ParamStore) -> Result<EncodedPromptBank> {
        let mut out = BTreeMap::new();
        for (finding, classes) in &self.prompts {
            let mut enc: [Vec<EmbeddingVector>; 3] = Default::default();
            for (k, list) in classes.iter().enumerate() {
                enc[k] = list
                    .iter()
                    .map(|t| encoder.encode_text(t, params))
                    .collect::<Result<_>>()?;
            }
            out.insert(*finding, enc);
        }
        Ok(EncodedPromptBank { prompts: out })
    }
}

/// Prompt embeddings computed once per parameter setting.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPromptBank {
    prompts: BTreeMap<Finding, [Vec<EmbeddingVector>; 3]>,
}

impl EncodedPromptBank {
    pub fn new(prompts: BTreeMap<Finding, [Vec<EmbeddingVector>; 3]>) -> Result<Self> {
        for (finding, classes) in &prompts {
            if classes.iter().any(|c| c.is_empty()) {
                return Err(Error::domain(format!("empty prompt class for {finding}")));
            }
        }
        Ok(EncodedPromptBank { prompts })
    }

    /// Mean cosine similarity between `v` and each class's prompts.
    pub fn class_scores(&self, v: &EmbeddingVector, finding: Finding) -> Result<[f64; 3]> {
        let classes = self
            .prompts
            .get(&finding)
            .ok_or_else(|| Error::domain(format!("prompt bank has no entry for {finding}")))?;
        let mut scores = [0.0; 3];
        for (k, list) in classes.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::domain(format!("empty prompt class for {finding}")));
            }
            scores[k] = list.iter().map(|p| v.cosine(p)).sum::<f64>() / list.len() as f64;
        }
        Ok(scores)
    }

    /// Softmax (temperature 1) of the mean class similarities.
    pub fn classify(&self, v: &EmbeddingVector, finding: Finding) -> Result<ProbTriple> {
        ProbTriple::from_logits(&self.class_scores(v, finding)?)
    }
}

/// Zero-shot prompt-ensemble classification of a pair embedding.
pub fn zero_shot_classify(
    v: &EmbeddingVector,
    bank: &PromptBank,
    finding: Finding,
    encoder: &Encoder,
    params: &ParamStore,
) -> Result<ProbTriple> {
    let classes = bank.classes(finding)?;
    let mut scores = [0.0; 3];
    for (k, list) in classes.iter().enumerate() {
        let mut sum = 0.0;
        for p in list {
            sum += v.cosine(&encoder.encode_text(p, params)?);
        }
        scores[k] = sum / list.len() as f64;
    }
    ProbTriple::from_logits(&scores)
}

fn check_variants(variants: &[EmbeddingVector]) -> Result<()> {
    if variants.len() != 3 {
        return Err(Error::domain(format!(
            "expected 3 directional variants, got {}",
            variants.len()
        )));
    }
    Ok(())
}

/// Label whose variant report is most similar to `v`; ties go to stable,
/// then improved.
pub fn retrieval_classify(
    v: &EmbeddingVector,
    variants: &[EmbeddingVector],
) -> Result<ProgressionLabel> {
    check_variants(variants)?;
    Ok(argmax_prefer_stable(&[
        v.cosine(&variants[0]),
        v.cosine(&variants[1]),
        v.cosine(&variants[2]),
    ]))
}

/// Variant similarities turned into probabilities, so that inversion-aware
/// fusion applies to retrieval-based predictions.
pub fn retrieval_probs(v: &EmbeddingVector, variants: &[EmbeddingVector]) -> Result<ProbTriple> {
    check_variants(variants)?;
    let p = softmax_unchecked(&[
        v.cosine(&variants[0]),
        v.cosine(&variants[1]),
        v.cosine(&variants[2]),
    ]);
    Ok(ProbTriple::new_unchecked([p[0], p[1], p[2]]))
}

fn argmax_prefer_stable(s: &[f64; 3]) -> ProgressionLabel {
    let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [
        ProgressionLabel::Stable,
        ProgressionLabel::Improved,
        ProgressionLabel::Worsened,
    ]
    .into_iter()
    .find(|l| s[l.index()] == best)
    .unwrap_or(ProgressionLabel::Stable)
}
