//! Classification protocols and retrieval/screening metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{combined_score, invert_label, ProgressionLabel};
use crate::numerics::{rng_from, Matrix};
use crate::objectives::ProbTriple;

/// Unweighted mean of per-class recall over the classes present in `truth`,
/// in percent.
pub fn macro_accuracy(pred: &[ProgressionLabel], truth: &[ProgressionLabel]) -> Result<f64> {
    let correct: Vec<bool> = pred.iter().zip(truth).map(|(p, t)| p == t).collect();
    if pred.len() != truth.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    macro_of(&correct, truth)
}

fn macro_of(correct: &[bool], truth: &[ProgressionLabel]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::domain("macro accuracy of an empty set"));
    }
    let mut hit = [0usize; 3];
    let mut total = [0usize; 3];
    for (&ok, y) in correct.iter().zip(truth) {
        total[y.index()] += 1;
        hit[y.index()] += usize::from(ok);
    }
    let mut recalls: Vec<f64> = (0..3)
        .filter(|&k| total[k] > 0)
        .map(|k| hit[k] as f64 / total[k] as f64)
        .collect();
    // Order-free summation keeps the value exact under class relabelling.
    recalls.sort_by(f64::total_cmp);
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// A labelled pair in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolCase<X> {
    pub id: String,
    pub prev: X,
    pub cur: X,
    pub label: ProgressionLabel,
}

impl<X: Clone> ProtocolCase<X> {
    /// The same case fed in reverse, with the inverted label.
    pub fn swapped(&self) -> Self {
        ProtocolCase {
            id: self.id.clone(),
            prev: self.cur.clone(),
            cur: self.prev.clone(),
            label: invert_label(self.label),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolScores {
    pub standard: f64,
    pub reversed: f64,
    pub combined: f64,
    pub consistency: f64,
}

impl ProtocolScores {
    fn mean(all: &[ProtocolScores]) -> ProtocolScores {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&ProtocolScores) -> f64| all.iter().map(f).sum::<f64>() / n;
        ProtocolScores {
            standard: sum(|s| s.standard),
            reversed: sum(|s| s.reversed),
            combined: sum(|s| s.combined),
            consistency: sum(|s| s.consistency),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingProtocol {
    pub scores: ProtocolScores,
    /// Cases per true class (improved, stable, worsened).
    pub counts: [usize; 3],
}

/// Runs the four protocols. `classify(a, b)` returns probabilities for the
/// pair fed as (a, b).
pub fn evaluate_protocols<X, F>(cases: &[ProtocolCase<X>], mut classify: F) -> Result<FindingProtocol>
where
    F: FnMut(&X, &X) -> Result<ProbTriple>,
{
    if cases.is_empty() {
        return Err(Error::domain("no cases to evaluate"));
    }
    let n = cases.len();
    let mut truth = Vec::with_capacity(n);
    let mut truth_rev = Vec::with_capacity(n);
    let mut fwd_ok = Vec::with_capacity(n);
    let mut rev_ok = Vec::with_capacity(n);
    let mut comb_ok = Vec::with_capacity(n);
    let mut counts = [0usize; 3];
    for case in cases {
        let wrap = |e: Error| Error::Evaluation {
            case: case.id.clone(),
            source: Box::new(e),
        };
        let p_fwd = classify(&case.prev, &case.cur).map_err(wrap)?;
        let p_bwd = classify(&case.cur, &case.prev).map_err(wrap)?;
        let y = case.label;
        truth.push(y);
        truth_rev.push(invert_label(y));
        counts[y.index()] += 1;
        fwd_ok.push(p_fwd.argmax() == y);
        rev_ok.push(p_bwd.argmax() == invert_label(y));
        comb_ok.push(combined_score(&p_fwd, &p_bwd).map_err(wrap)?.argmax() == y);
    }
    let both: Vec<bool> = fwd_ok.iter().zip(&rev_ok).map(|(a, b)| *a && *b).collect();
    Ok(FindingProtocol {
        scores: ProtocolScores {
            standard: macro_of(&fwd_ok, &truth)?,
            reversed: macro_of(&rev_ok, &truth_rev)?,
            combined: macro_of(&comb_ok, &truth)?,
            consistency: macro_of(&both, &truth)?,
        },
        counts,
    })
}

/// Per-finding protocol results and their unweighted average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub per_finding: BTreeMap<String, FindingProtocol>,
    pub average: ProtocolScores,
}

impl ProtocolReport {
    pub fn new(per_finding: BTreeMap<String, FindingProtocol>) -> Result<Self> {
        if per_finding.is_empty() {
            return Err(Error::domain("protocol report without findings"));
        }
        let all: Vec<ProtocolScores> = per_finding.values().map(|f| f.scores).collect();
        Ok(ProtocolReport {
            average: ProtocolScores::mean(&all),
            per_finding,
        })
    }

    /// One row per finding plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("finding,standard,reversed,combined,consistency,n_improved,n_stable,n_worsened\n");
        for (name, f) in &self.per_finding {
            let s = f.scores;
            let _ = writeln!(
                out,
                "{name},{:.4},{:.4},{:.4},{:.4},{},{},{}",
                s.standard, s.reversed, s.combined, s.consistency, f.counts[0], f.counts[1], f.counts[2]
            );
        }
        let a = self.average;
        let _ = writeln!(
            out,
            "average,{:.4},{:.4},{:.4},{:.4},,,",
            a.standard, a.reversed, a.combined, a.consistency
        );
        out
    }
}

/// Query × candidate similarities and each query's true candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGrid {
    sims: Matrix,
    truth: Vec<usize>,
}

impl SimilarityGrid {
    pub fn new(sims: Matrix, truth: Vec<usize>) -> Result<Self> {
        if truth.len() != sims.rows() {
            return Err(Error::domain(format!(
                "{} true matches for {} queries",
                truth.len(),
                sims.rows()
            )));
        }
        if let Some(t) = truth.iter().find(|&&t| t >= sims.cols()) {
            return Err(Error::domain(format!("true match {t} outside candidate range")));
        }
        if sims.data().iter().any(|s| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(s)) {
            return Err(Error::domain("similarities must lie in [-1, 1]"));
        }
        Ok(SimilarityGrid { sims, truth })
    }

    pub fn queries(&self) -> usize {
        self.sims.rows()
    }

    pub fn candidates(&self) -> usize {
        self.sims.cols()
    }

    /// 1-based rank of the true match; earlier candidates win ties.
    pub fn rank(&self, q: usize) -> usize {
        let row = self.sims.row(q);
        let t = self.truth[q];
        let s = row[t];
        1 + row
            .iter()
            .enumerate()
            .filter(|&(j, &x)| x > s || (x == s && j < t))
            .count()
    }

    /// Index of the best candidate; earlier candidates win ties.
    pub fn top1(&self, q: usize) -> usize {
        let row = self.sims.row(q);
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        best
    }
}

pub fn recall_at_k(grid: &SimilarityGrid, k: usize) -> Result<f64> {
    if k == 0 || k > grid.candidates() {
        return Err(Error::domain(format!(
            "k = {k} outside 1..={}",
            grid.candidates()
        )));
    }
    if grid.queries() == 0 {
        return Err(Error::domain("no queries"));
    }
    let hits = (0..grid.queries()).filter(|&q| grid.rank(q) <= k).count();
    Ok(100.0 * hits as f64 / grid.queries() as f64)
}

/// Lowercase stems of temporal language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLexicon {
    stems: Vec<String>,
}

const TEMPORAL_STEMS: [&str; 15] = [
    "change", "cleared", "constant", "decrease", "elevate", "expand", "improve", "increase",
    "persistent", "reduce", "remove", "resolve", "stable", "worse", "new",
];

impl TemporalLexicon {
    pub fn new(stems: Vec<String>) -> Result<Self> {
        if stems.is_empty() {
            return Err(Error::domain("temporal lexicon is empty"));
        }
        let set: BTreeSet<&String> = stems.iter().collect();
        if set.len() != stems.len() {
            return Err(Error::domain("temporal lexicon stems must be distinct"));
        }
        Ok(TemporalLexicon {
            stems: stems.into_iter().map(|s| s.to_lowercase()).collect(),
        })
    }

    pub fn standard() -> Self {
        TemporalLexicon {
            stems: TEMPORAL_STEMS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    /// Stems that prefix at least one word. A stem ending in `e` also
    /// matches its inflections with the `e` dropped (`improve` ~ `improving`)
    /// as long as the word is not shorter than the stem.
    pub fn matches<S: AsRef<str>>(&self, words: &[S]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            for s in &self.stems {
                let trimmed = s.strip_suffix('e').unwrap_or(s);
                if w.starts_with(s.as_str()) || (w.starts_with(trimmed) && w.len() >= s.len()) {
                    out.insert(s.clone());
                }
            }
        }
        out
    }
}

/// F1 overlap of temporal stems, in percent.
pub fn tem_score<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    retrieved: &[T],
    lexicon: &TemporalLexicon,
) -> f64 {
    let a = lexicon.matches(reference);
    let b = lexicon.matches(retrieved);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 100.0,
        (true, false) | (false, true) => 0.0,
        _ => 100.0 * 2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64,
    }
}

/// Mean TEM over queries, each scored against its top-1 retrieved report.
pub fn corpus_tem<S: AsRef<str>>(
    grid: &SimilarityGrid,
    query_reports: &[Vec<S>],
    candidate_reports: &[Vec<S>],
    lexicon: &TemporalLexicon,
) -> Result<f64> {
    if query_reports.len() != grid.queries() || candidate_reports.len() != grid.candidates() {
        return Err(Error::domain("report lists do not match the similarity grid"));
    }
    if grid.queries() == 0 {
        return Err(Error::domain("no queries"));
    }
    let total: f64 = (0..grid.queries())
        .map(|q| tem_score(&query_reports[q], &candidate_reports[grid.top1(q)], lexicon))
        .sum();
    Ok(total / grid.queries() as f64)
}

/// Mann–Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("non-finite score"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::domain("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j]
            .iter()
            .filter(|&&k| labels[k] == 1)
            .count() as f64
            * midrank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `reps` index sets of `size` drawn without replacement from `0..n`.
pub fn subsample_indices(n: usize, size: usize, reps: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > n {
        return Err(Error::domain(format!("cannot draw {size} of {n}")));
    }
    let mut rng = rng_from(seed);
    Ok((0..reps)
        .map(|_| {
            let mut v = sample(&mut rng, n, size).into_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::domain("no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * (var / n).sqrt()))
}

/// Structured-text evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    pub protocols: ProtocolReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl EvaluationReport {
    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serialises") + "\n";
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.protocols.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
