//! Deterministic synthetic longitudinal studies.
//!
//! Each study carries four findings with a severity at both timepoints.
//! Progression labels and the change flag are pure functions of the
//! severities, images are rendered from them, and the report is composed
//! from templated sentences, one per finding.
//!
//! Severity distribution, per study: with probability `no_change_prob`
//! every finding is drawn stable. Otherwise each finding is independently
//! stable with probability `stable_prob`, else improved or worsened with
//! equal probability:
//!
//! - improved: `s_cur ~ U(0, 0.35)`, `s_prev = min(1, s_cur + d)`
//! - worsened: `s_cur ~ U(0.65, 1)`, `s_prev = max(0, s_cur − d)`
//! - stable: `s_prev ~ U(0, 1)`, `s_cur = s_prev + U(−δ/2, δ/2)`, redrawn
//!   until neither timepoint sits on the other side of `θ_p`
//!
//! with `d ~ U(0.15, 0.6)`. Labels are then recomputed from the drawn
//! severities, so custom bands always yield consistent labels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{Image, TokenSequence, SENTENCE_BREAK};
use crate::error::{Error, Result};
use crate::inference::ProgressionLabel;
use crate::numerics::{mix_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finding {
    Effusion,
    Pneumothorax,
    Consolidation,
    Edema,
}

impl Finding {
    pub const ALL: [Finding; 4] = [
        Finding::Effusion,
        Finding::Pneumothorax,
        Finding::Consolidation,
        Finding::Edema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finding::Effusion => "effusion",
            Finding::Pneumothorax => "pneumothorax",
            Finding::Consolidation => "consolidation",
            Finding::Edema => "edema",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        Finding::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown finding {s:?}")))
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial pattern a finding paints onto the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Bottom quarter, intensity ramping towards the base.
    BasalGradient,
    /// Uniform band across the top rows.
    ApicalBand,
    /// Solid block in the left mid zone.
    FocalPatch,
    /// Checkered texture in the right mid zone.
    DiffuseTexture,
}

impl Archetype {
    /// Pattern weight at a pixel; zero outside the support region.
    pub fn weight(self, row: usize, col: usize, side: usize) -> f64 {
        let in_rows = |a: usize, b: usize| row * 32 >= a * side && row * 32 < b * side;
        let in_cols = |a: usize, b: usize| col * 32 >= a * side && col * 32 < b * side;
        match self {
            Archetype::BasalGradient => {
                let r0 = (3 * side).div_ceil(4);
                if row >= r0 {
                    (row - r0 + 1) as f64 / (side - r0) as f64
                } else {
                    0.0
                }
            }
            Archetype::ApicalBand => {
                if in_rows(0, 6) {
                    1.0
                } else {
                    0.0
                }
            }
            Archetype::FocalPatch => {
                if in_rows(9, 20) && in_cols(4, 14) {
                    1.0
                } else {
                    0.0
                }
            }
            Archetype::DiffuseTexture => {
                if in_rows(9, 20) && in_cols(18, 28) {
                    if (row / 2 + col / 2) % 2 == 0 {
                        1.0
                    } else {
                        0.5
                    }
                } else {
                    0.0
                }
            }
        }
    }

    /// Mean intensity of `image` over this pattern's support.
    pub fn region_mean(self, image: &Image) -> f64 {
        let side = image.side();
        let (mut sum, mut n) = (0.0, 0usize);
        for r in 0..side {
            for c in 0..side {
                if self.weight(r, c, side) > 0.0 {
                    sum += image.at(r, c) as f64;
                    n += 1;
                }
            }
        }
        sum / n.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub finding: Finding,
    pub archetype: Archetype,
    /// `θ_p`: severities above this are present.
    pub presence_threshold: f64,
    /// `δ`: severity moves within this band are stable.
    pub stability_band: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_BAND: f64 = 0.1;
pub const DEFAULT_NOISE: f64 = 0.05;
pub const DEFAULT_SIDE: usize = 64;
const AMPLITUDE: f64 = 0.45;
const MAX_NOISE: f64 = 0.2;

impl FindingSpec {
    pub fn standard(finding: Finding) -> Self {
        let archetype = match finding {
            Finding::Effusion => Archetype::BasalGradient,
            Finding::Pneumothorax => Archetype::ApicalBand,
            Finding::Consolidation => Archetype::FocalPatch,
            Finding::Edema => Archetype::DiffuseTexture,
        };
        FindingSpec {
            finding,
            archetype,
            presence_threshold: DEFAULT_THRESHOLD,
            stability_band: DEFAULT_BAND,
        }
    }

    pub fn defaults() -> Vec<FindingSpec> {
        Finding::ALL.into_iter().map(FindingSpec::standard).collect()
    }

    pub fn with_bands(threshold: f64, band: f64) -> Vec<FindingSpec> {
        Finding::ALL
            .into_iter()
            .map(|f| FindingSpec {
                presence_threshold: threshold,
                stability_band: band,
                ..FindingSpec::standard(f)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, t) = (self.stability_band, self.presence_threshold);
        if !(0.0 < d && d < t && t < 1.0) {
            return Err(Error::config(format!(
                "{}: need 0 < δ ({d}) < θ_p ({t}) < 1",
                self.finding
            )));
        }
        Ok(())
    }

    pub fn present(&self, severity: f64) -> bool {
        severity > self.presence_threshold
    }

    pub fn label(&self, s_prev: f64, s_cur: f64) -> ProgressionLabel {
        if s_cur < s_prev - self.stability_band {
            ProgressionLabel::Improved
        } else if s_cur > s_prev + self.stability_band {
            ProgressionLabel::Worsened
        } else {
            ProgressionLabel::Stable
        }
    }
}

fn validate_specs(specs: &[FindingSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("at least one finding spec is required"));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.finding == s.finding) {
            return Err(Error::config(format!("finding {} listed twice", s.finding)));
        }
        if specs[..i].iter().any(|o| o.archetype == s.archetype) {
            return Err(Error::config(format!(
                "archetype of {} is shared with another finding",
                s.finding
            )));
        }
    }
    Ok(())
}

/// Smooth background shared by every rendering, in `[0.1, 0.45]`.
pub fn base_anatomy(row: usize, col: usize, side: usize) -> f64 {
    let span = (side.max(2) - 1) as f64;
    let x = 2.0 * col as f64 / span - 1.0;
    0.1 + 0.2 * (1.0 - x.abs()) + 0.15 * row as f64 / span
}

/// Renders one timepoint. Every finding adds its archetype scaled by its
/// severity, so region means are strictly increasing in severity.
pub fn render_image(
    specs: &[FindingSpec],
    severities: &[f64],
    side: usize,
    seed: u64,
    noise: f64,
) -> Result<Image> {
    if specs.len() != severities.len() {
        return Err(Error::domain(format!(
            "{} severities for {} findings",
            severities.len(),
            specs.len()
        )));
    }
    if let Some(s) = severities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::domain(format!("severity {s} outside [0, 1]")));
    }
    if !(0.0..=MAX_NOISE).contains(&noise) {
        return Err(Error::domain(format!("noise level {noise} outside [0, {MAX_NOISE}]")));
    }
    if side < 8 {
        return Err(Error::domain("image side must be at least 8"));
    }
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let mut v = base_anatomy(r, c, side);
            for (spec, &s) in specs.iter().zip(severities) {
                v += AMPLITUDE * s * spec.archetype.weight(r, c, side);
            }
            if noise > 0.0 {
                v += normal.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(side, pixels)
}

/// Severities of one finding at both timepoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingState {
    pub spec: FindingSpec,
    pub s_prev: f64,
    pub s_cur: f64,
}

impl FindingState {
    pub fn label(&self) -> ProgressionLabel {
        self.spec.label(self.s_prev, self.s_cur)
    }

    pub fn crosses_threshold(&self) -> bool {
        self.spec.present(self.s_prev) != self.spec.present(self.s_cur)
    }

    pub fn changed(&self) -> bool {
        self.label() != ProgressionLabel::Stable || self.crosses_threshold()
    }

    pub fn swapped(&self) -> Self {
        FindingState {
            s_prev: self.s_cur,
            s_cur: self.s_prev,
            ..*self
        }
    }

    pub fn sentence(&self) -> ReportSentence {
        let (p, q) = (self.spec.present(self.s_prev), self.spec.present(self.s_cur));
        let form = match (p, q) {
            (true, true) => SentenceForm::Progression(self.label()),
            (false, true) => SentenceForm::New,
            (true, false) => SentenceForm::Resolved,
            (false, false) => match self.label() {
                ProgressionLabel::Stable => SentenceForm::Absent,
                l => SentenceForm::Progression(l),
            },
        };
        ReportSentence {
            finding: self.spec.finding,
            form,
        }
    }
}

/// How a sentence describes its finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentenceForm {
    /// `F is improved|stable|worsened`
    Progression(ProgressionLabel),
    /// `F is new`
    New,
    /// `F is resolved`
    Resolved,
    /// `F is present`, the direction-free pattern.
    Present,
    /// `no F`
    Absent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSentence {
    pub finding: Finding,
    pub form: SentenceForm,
}

impl ReportSentence {
    pub fn words(&self) -> Vec<&'static str> {
        let f = self.finding.name();
        match self.form {
            SentenceForm::Progression(l) => vec![f, "is", l.name()],
            SentenceForm::New => vec![f, "is", "new"],
            SentenceForm::Resolved => vec![f, "is", "resolved"],
            SentenceForm::Present => vec![f, "is", "present"],
            SentenceForm::Absent => vec!["no", f],
        }
    }

    fn parse(words: &[&str]) -> Result<Self> {
        let bad = || Error::domain(format!("untemplatable sentence {:?}", words.join(" ")));
        match words {
            ["no", f] => Ok(ReportSentence {
                finding: Finding::parse(f).map_err(|_| bad())?,
                form: SentenceForm::Absent,
            }),
            [f, "is", w] => {
                let finding = Finding::parse(f).map_err(|_| bad())?;
                let form = match *w {
                    "new" => SentenceForm::New,
                    "resolved" => SentenceForm::Resolved,
                    "present" => SentenceForm::Present,
                    other => SentenceForm::Progression(
                        ProgressionLabel::parse(other).map_err(|_| bad())?,
                    ),
                };
                Ok(ReportSentence { finding, form })
            }
            _ => Err(bad()),
        }
    }
}

/// Word list of the report language; a word's position is its token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
}

const STANDARD_WORDS: [&str; 13] = [
    ".",
    "is",
    "no",
    "present",
    "effusion",
    "pneumothorax",
    "consolidation",
    "edema",
    "improved",
    "stable",
    "worsened",
    "resolved",
    "new",
];

impl Lexicon {
    pub fn standard() -> Self {
        debug_assert_eq!(STANDARD_WORDS[SENTENCE_BREAK as usize], ".");
        Lexicon {
            words: STANDARD_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercases, splits on whitespace and detaches full stops.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for raw in text.to_lowercase().split_whitespace() {
            let mut word = raw;
            let mut stops = 0;
            while let Some(w) = word.strip_suffix('.') {
                word = w;
                stops += 1;
            }
            if !word.is_empty() {
                ids.push(
                    self.id(word)
                        .ok_or_else(|| Error::domain(format!("word {word:?} not in lexicon")))?,
                );
            }
            ids.extend(std::iter::repeat(SENTENCE_BREAK).take(stops));
        }
        TokenSequence::new(ids, self.len())
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> String {
        tokens
            .tokens()
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_sentences(&self, sentences: &[ReportSentence]) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for s in sentences {
            for w in s.words() {
                ids.push(self.id(w).ok_or_else(|| {
                    Error::domain(format!("word {w:?} not in lexicon"))
                })?);
            }
            ids.push(SENTENCE_BREAK);
        }
        TokenSequence::new(ids, self.len())
    }

    /// Splits a templated report back into its sentences.
    pub fn parse_report(&self, tokens: &TokenSequence) -> Result<Vec<ReportSentence>> {
        tokens
            .sentences()
            .map(|s| {
                let words: Vec<&str> = s
                    .iter()
                    .map(|&t| self.word(t).unwrap_or("<unk>"))
                    .collect();
                ReportSentence::parse(&words)
            })
            .collect()
    }
}

/// One sentence per finding, in the order of `states`.
pub fn compose_report(states: &[FindingState], lexicon: &Lexicon) -> Result<TokenSequence> {
    let sentences: Vec<ReportSentence> = states.iter().map(FindingState::sentence).collect();
    lexicon.encode_sentences(&sentences)
}

/// Output of the rule-based change labeller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeAssessment {
    Change,
    NoChange,
    Abstain,
}

impl ChangeAssessment {
    pub fn flag(self) -> Option<u8> {
        match self {
            ChangeAssessment::Change => Some(1),
            ChangeAssessment::NoChange => Some(0),
            ChangeAssessment::Abstain => None,
        }
    }
}

const CHANGE_STEMS: [&str; 23] = [
    "aggravat", "exacerbat", "increas", "wors", "progress", "enlarg", "improv", "decreas",
    "diminish", "reduc", "regress", "resolv", "disappear", "new", "develop", "recur", "expand",
    "elevat", "clear", "remov", "better", "grow", "larger",
];

const STABLE_STEMS: [&str; 5] = ["stable", "unchang", "persist", "constant", "similar"];

/// Rule-based stand-in for the report-pair change labeller. Only the
/// follow-up wording decides; the previous report is accepted for
/// interface parity and to reject empty inputs.
pub fn assign_change_flag(previous: &str, followup: &str) -> ChangeAssessment {
    if previous.trim().is_empty() && followup.trim().is_empty() {
        return ChangeAssessment::Abstain;
    }
    let text = followup.to_lowercase();
    let words: Vec<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.iter().any(|w| CHANGE_STEMS.iter().any(|s| w.starts_with(s))) {
        return ChangeAssessment::Change;
    }
    let no_interval_change = words
        .windows(3)
        .any(|w| w == ["no", "interval", "change"]);
    if no_interval_change || words.iter().any(|w| STABLE_STEMS.iter().any(|s| w.starts_with(s))) {
        return ChangeAssessment::NoChange;
    }
    ChangeAssessment::Abstain
}

/// Three-stage construction of direction-specific reports for `target`,
/// ordered (improved, stable, worsened).
///
/// Non-target sentences are neutralised: directional and new findings
/// become `F is present`, resolved ones `no F`. The target sentence is
/// rewritten in place; when the target is absent or negated the negation is
/// dropped and the directional sentence appended.
pub fn build_retrieval_variants(
    report: &TokenSequence,
    target: Finding,
    lexicon: &Lexicon,
) -> Result<[TokenSequence; 3]> {
    let neutral = neutralize(report, target, lexicon)?;
    let slot = neutral.iter().position(|s| {
        s.finding == target && s.form != SentenceForm::Absent
    });
    let mut base: Vec<ReportSentence> = neutral
        .iter()
        .copied()
        .filter(|s| !(s.finding == target && slot.is_none()))
        .collect();
    let at = match slot {
        Some(i) => i,
        None => {
            base.push(ReportSentence {
                finding: target,
                form: SentenceForm::Absent,
            });
            base.len() - 1
        }
    };
    let mut out: [Option<TokenSequence>; 3] = Default::default();
    for label in ProgressionLabel::ALL {
        let mut v = base.clone();
        v[at].form = SentenceForm::Progression(label);
        out[label.index()] = Some(lexicon.encode_sentences(&v)?);
    }
    Ok(out.map(|t| t.expect("all three variants built")))
}

/// Stages 1 and 2: sentence split and neutralisation of non-target findings.
pub fn neutralize(
    report: &TokenSequence,
    target: Finding,
    lexicon: &Lexicon,
) -> Result<Vec<ReportSentence>> {
    let mut sentences = lexicon.parse_report(report)?;
    for s in sentences.iter_mut().filter(|s| s.finding != target) {
        s.form = match s.form {
            SentenceForm::Progression(_) | SentenceForm::New | SentenceForm::Present => {
                SentenceForm::Present
            }
            SentenceForm::Resolved | SentenceForm::Absent => SentenceForm::Absent,
        };
    }
    Ok(sentences)
}

/// Knobs of the study generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub image_side: usize,
    pub noise: f64,
    pub presence_threshold: f64,
    pub stability_band: f64,
    pub no_change_prob: f64,
    pub stable_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_size: 2000,
            test_size: 500,
            image_side: DEFAULT_SIDE,
            noise: DEFAULT_NOISE,
            presence_threshold: DEFAULT_THRESHOLD,
            stability_band: DEFAULT_BAND,
            no_change_prob: 0.25,
            stable_prob: 0.15,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("data.train_size and data.test_size must be positive"));
        }
        if self.image_side < 8 {
            return Err(Error::config("data.image_side must be at least 8"));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise) {
            return Err(Error::config(format!("data.noise must lie in [0, {MAX_NOISE}]")));
        }
        for (k, v) in [
            ("data.no_change_prob", self.no_change_prob),
            ("data.stable_prob", self.stable_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{k} must lie in [0, 1]")));
            }
        }
        validate_specs(&self.specs())
    }

    pub fn specs(&self) -> Vec<FindingSpec> {
        FindingSpec::with_bands(self.presence_threshold, self.stability_band)
    }

    pub fn generator(&self) -> Result<StudyGenerator> {
        self.validate()?;
        StudyGenerator::new(self.specs(), self.image_side, self.noise)
            .map(|g| g.with_probs(self.no_change_prob, self.stable_prob))
    }
}

/// One synthetic prior/current study pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedStudy {
    pub id: String,
    pub seed: u64,
    pub prev: Image,
    pub cur: Image,
    pub report: TokenSequence,
    pub change: u8,
    pub states: Vec<FindingState>,
}

impl PairedStudy {
    pub fn labels(&self) -> Vec<ProgressionLabel> {
        self.states.iter().map(FindingState::label).collect()
    }

    pub fn label(&self, finding: Finding) -> Option<ProgressionLabel> {
        self.states
            .iter()
            .find(|s| s.spec.finding == finding)
            .map(FindingState::label)
    }

    /// Timepoints exchanged, with labels, flag and report recomputed.
    pub fn swapped(&self, lexicon: &Lexicon) -> Result<PairedStudy> {
        let states: Vec<FindingState> = self.states.iter().map(FindingState::swapped).collect();
        Ok(PairedStudy {
            id: format!("{}-swapped", self.id),
            seed: self.seed,
            prev: self.cur.clone(),
            cur: self.prev.clone(),
            report: compose_report(&states, lexicon)?,
            change: change_flag(&states),
            states,
        })
    }
}

pub fn change_flag(states: &[FindingState]) -> u8 {
    u8::from(states.iter().any(FindingState::changed))
}

#[derive(Clone, Debug)]
pub struct StudyGenerator {
    specs: Vec<FindingSpec>,
    side: usize,
    noise: f64,
    no_change_prob: f64,
    stable_prob: f64,
    lexicon: Lexicon,
}

impl StudyGenerator {
    pub fn new(specs: Vec<FindingSpec>, side: usize, noise: f64) -> Result<Self> {
        validate_specs(&specs)?;
        if !(0.0..=MAX_NOISE).contains(&noise) {
            return Err(Error::domain(format!("noise level {noise} outside [0, {MAX_NOISE}]")));
        }
        Ok(StudyGenerator {
            specs,
            side,
            noise,
            no_change_prob: 0.25,
            stable_prob: 0.15,
            lexicon: Lexicon::standard(),
        })
    }

    pub fn with_probs(mut self, no_change_prob: f64, stable_prob: f64) -> Self {
        self.no_change_prob = no_change_prob;
        self.stable_prob = stable_prob;
        self
    }

    pub fn specs(&self) -> &[FindingSpec] {
        &self.specs
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    fn draw_states(&self, rng: &mut impl Rng) -> Vec<FindingState> {
        let quiet = rng.gen::<f64>() < self.no_change_prob;
        self.specs
            .iter()
            .map(|spec| {
                let pick = if quiet || rng.gen::<f64>() < self.stable_prob {
                    ProgressionLabel::Stable
                } else if rng.gen::<bool>() {
                    ProgressionLabel::Improved
                } else {
                    ProgressionLabel::Worsened
                };
                let (s_prev, s_cur) = match pick {
                    ProgressionLabel::Improved => {
                        let cur = rng.gen_range(0.0..0.35);
                        let d = rng.gen_range(0.15..0.6);
                        (f64::min(1.0, cur + d), cur)
                    }
                    ProgressionLabel::Worsened => {
                        let cur = rng.gen_range(0.65..1.0);
                        let d = rng.gen_range(0.15..0.6);
                        (f64::max(0.0, cur - d), cur)
                    }
                    ProgressionLabel::Stable => loop {
                        let prev: f64 = rng.gen_range(0.0..1.0);
                        let half = 0.5 * spec.stability_band;
                        let cur = (prev + rng.gen_range(-half..half)).clamp(0.0, 1.0);
                        if spec.present(prev) == spec.present(cur) {
                            break (prev, cur);
                        }
                    },
                };
                FindingState {
                    spec: *spec,
                    s_prev,
                    s_cur,
                }
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<PairedStudy> {
        let mut rng = rng_from(seed);
        let states = self.draw_states(&mut rng);
        let prev_s: Vec<f64> = states.iter().map(|s| s.s_prev).collect();
        let cur_s: Vec<f64> = states.iter().map(|s| s.s_cur).collect();
        Ok(PairedStudy {
            id: format!("{seed:016x}"),
            seed,
            prev: render_image(&self.specs, &prev_s, self.side, mix_seed(seed, 1), self.noise)?,
            cur: render_image(&self.specs, &cur_s, self.side, mix_seed(seed, 2), self.noise)?,
            report: compose_report(&states, &self.lexicon)?,
            change: change_flag(&states),
            states,
        })
    }
}

/// A study at the default image size.
pub fn generate_study(seed: u64, specs: &[FindingSpec], noise: f64) -> Result<PairedStudy> {
    StudyGenerator::new(specs.to_vec(), DEFAULT_SIDE, noise)?.generate(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub studies: Vec<PairedStudy>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }
}

/// Study `i` of a split is seeded with `mix(mix(seed, split), i)`, so any
/// subset can be regenerated independently of the others.
pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Dataset> {
    let generator = cfg.generator()?;
    let base = mix_seed(cfg.seed, split.stream());
    let n = match split {
        Split::Train => cfg.train_size,
        Split::Test => cfg.test_size,
    };
    let studies = (0..n as u64)
        .map(|i| generator.generate(mix_seed(base, i)))
        .collect::<Result<_>>()?;
    Ok(Dataset { split, studies })
}

const IMAGE_MAGIC: &str = "tila-image";

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("{IMAGE_MAGIC} {} {}\n", image.side(), image.side()).into_bytes();
    for p in image.pixels() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing image header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let dims = match fields.as_slice() {
        [m, r, c] if *m == IMAGE_MAGIC => (r.parse::<usize>(), c.parse::<usize>()),
        _ => return Err(Error::format(path, format!("bad image header {header:?}"))),
    };
    let (rows, cols) = match dims {
        (Ok(r), Ok(c)) if r == c => (r, c),
        _ => return Err(Error::format(path, "image must be square with numeric dims")),
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Image::new(rows, pixels).map_err(|e| Error::format(path, e.to_string()))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub labels: BTreeMap<Finding, ProgressionLabel>,
    pub severities: BTreeMap<Finding, [f64; 2]>,
    pub c: u8,
    pub report: String,
    pub prev: String,
    pub cur: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `<dir>/<split>/manifest.jsonl` plus two image files per study.
pub fn save_dataset(dir: &Path, data: &Dataset, lexicon: &Lexicon) -> Result<()> {
    let split_dir = dir.join(data.split.name());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let mut manifest = Vec::new();
    for s in &data.studies {
        let prev = format!("{}_prev.f32", s.id);
        let cur = format!("{}_cur.f32", s.id);
        write_image(&split_dir.join(&prev), &s.prev)?;
        write_image(&split_dir.join(&cur), &s.cur)?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            seed: s.seed,
            split: data.split,
            labels: s.states.iter().map(|st| (st.spec.finding, st.label())).collect(),
            severities: s
                .states
                .iter()
                .map(|st| (st.spec.finding, [st.s_prev, st.s_cur]))
                .collect(),
            c: s.change,
            report: lexicon.detokenize(&s.report),
            prev,
            cur,
        };
        serde_json::to_writer(&mut manifest, &rec).expect("record serialises");
        manifest.write_all(b"\n").expect("in-memory write");
    }
    let path = split_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a split written by [`save_dataset`]; thresholds and bands come
/// from `specs`, and stored labels are checked against the severities.
pub fn load_dataset(
    dir: &Path,
    split: Split,
    specs: &[FindingSpec],
    lexicon: &Lexicon,
) -> Result<Dataset> {
    let split_dir = dir.join(split.name());
    let path = split_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut studies = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        let mut states = Vec::new();
        for spec in specs {
            let [s_prev, s_cur] = *rec.severities.get(&spec.finding).ok_or_else(|| {
                Error::format(&path, format!("line {}: no severity for {}", n + 1, spec.finding))
            })?;
            let st = FindingState {
                spec: *spec,
                s_prev,
                s_cur,
            };
            if rec.labels.get(&spec.finding) != Some(&st.label()) {
                return Err(Error::format(
                    &path,
                    format!("line {}: label of {} disagrees with severities", n + 1, spec.finding),
                ));
            }
            states.push(st);
        }
        if change_flag(&states) != rec.c {
            return Err(Error::format(&path, format!("line {}: inconsistent change flag", n + 1)));
        }
        studies.push(PairedStudy {
            id: rec.id,
            seed: rec.seed,
            prev: read_image(&split_dir.join(&rec.prev))?,
            cur: read_image(&split_dir.join(&rec.cur))?,
            report: lexicon.tokenize(&rec.report)?,
            change: rec.c,
            states,
        });
    }
    Ok(Dataset { split, studies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::TemporalLexicon;
    use ProgressionLabel::*;

    fn gen() -> StudyGenerator {
        StudyGenerator::new(FindingSpec::defaults(), DEFAULT_SIDE, DEFAULT_NOISE).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let specs = FindingSpec::defaults();
        let a = generate_study(7, &specs, 0.05).unwrap();
        let b = generate_study(7, &specs, 0.05).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_study(8, &specs, 0.05).unwrap());
    }

    #[test]
    fn huge_band_makes_everything_stable() {
        let specs = FindingSpec::with_bands(0.95, 0.9);
        let g = StudyGenerator::new(specs, DEFAULT_SIDE, 0.05).unwrap();
        for seed in 0..300 {
            let s = g.generate(seed).unwrap();
            assert!(s.labels().iter().all(|&l| l == Stable));
            let crossing = s.states.iter().any(FindingState::crosses_threshold);
            assert_eq!(s.change, u8::from(crossing));
        }
    }

    #[test]
    fn class_balance_and_consistency() {
        let g = gen();
        let mut counts = [[0usize; 3]; 4];
        let n = 10_000;
        for i in 0..n {
            let s = g.generate(mix_seed(99, i)).unwrap();
            for (k, st) in s.states.iter().enumerate() {
                let l = st.label();
                counts[k][l.index()] += 1;
                let want = if st.s_cur < st.s_prev - st.spec.stability_band {
                    Improved
                } else if st.s_cur > st.s_prev + st.spec.stability_band {
                    Worsened
                } else {
                    Stable
                };
                assert_eq!(l, want);
            }
            let changed = s.states.iter().any(|st| {
                st.label() != Stable || st.spec.present(st.s_prev) != st.spec.present(st.s_cur)
            });
            assert_eq!(s.change, u8::from(changed));
        }
        for per_finding in counts {
            for c in per_finding {
                let f = c as f64 / n as f64;
                assert!((0.25..=0.42).contains(&f), "class frequency {f}");
            }
        }
    }

    #[test]
    fn render_contracts() {
        let specs = FindingSpec::defaults();
        let img = render_image(&specs, &[0.0; 4], 64, 1, 0.0).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(img.at(r, c), base_anatomy(r, c, 64) as f32);
            }
        }
        let lo = render_image(&specs, &[0.5, 0.0, 0.0, 0.0], 64, 3, 0.05).unwrap();
        let hi = render_image(&specs, &[1.0, 0.0, 0.0, 0.0], 64, 3, 0.05).unwrap();
        let region = Archetype::BasalGradient;
        assert!(region.region_mean(&hi) > region.region_mean(&lo));
        for spec in &specs {
            let mut prev_mean = f64::NEG_INFINITY;
            for step in 0..=10 {
                let mut sev = [0.3; 4];
                sev[spec.finding.index()] = step as f64 / 10.0;
                let m = spec.archetype.region_mean(&render_image(&specs, &sev, 64, 5, 0.05).unwrap());
                assert!(m > prev_mean);
                prev_mean = m;
            }
        }
        let g = gen();
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for seed in 0..500 {
            let s = g.generate(seed).unwrap();
            for p in s.prev.pixels().iter().chain(s.cur.pixels()) {
                lo = lo.min(*p);
                hi = hi.max(*p);
            }
        }
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(render_image(&specs, &[1.2, 0.0, 0.0, 0.0], 64, 1, 0.0).is_err());
    }

    fn state(f: Finding, s_prev: f64, s_cur: f64) -> FindingState {
        FindingState {
            spec: FindingSpec::standard(f),
            s_prev,
            s_cur,
        }
    }

    #[test]
    fn report_examples() {
        let lex = Lexicon::standard();
        let states = [
            state(Finding::Effusion, 0.4, 0.8),
            state(Finding::Pneumothorax, 0.0, 0.05),
            state(Finding::Consolidation, 0.1, 0.1),
            state(Finding::Edema, 0.0, 0.0),
        ];
        let r = compose_report(&states, &lex).unwrap();
        assert_eq!(
            lex.detokenize(&r),
            "effusion is worsened . no pneumothorax . no consolidation . no edema ."
        );
        let stable: Vec<_> = Finding::ALL.iter().map(|&f| state(f, 0.5, 0.52)).collect();
        let words = lex.detokenize(&compose_report(&stable, &lex).unwrap());
        assert_eq!(words.matches("stable").count(), 4);
        for w in ["improved", "worsened", "new", "resolved"] {
            assert!(!words.contains(w));
        }
        let resolved = [state(Finding::Effusion, 0.5, 0.05)];
        assert_eq!(
            lex.detokenize(&compose_report(&resolved, &lex).unwrap()),
            "effusion is resolved ."
        );
        assert_eq!(change_flag(&resolved), 1);
    }

    #[test]
    fn directional_sentences_have_one_stem() {
        let stems = TemporalLexicon::standard();
        for f in Finding::ALL {
            for form in [
                SentenceForm::Progression(Improved),
                SentenceForm::Progression(Stable),
                SentenceForm::Progression(Worsened),
                SentenceForm::New,
                SentenceForm::Resolved,
            ] {
                let s = ReportSentence { finding: f, form };
                assert_eq!(stems.matches(&s.words()).len(), 1, "{:?}", s.words());
            }
            for form in [SentenceForm::Present, SentenceForm::Absent] {
                let s = ReportSentence { finding: f, form };
                assert!(stems.matches(&s.words()).is_empty());
            }
        }
    }

    #[test]
    fn swap_closure() {
        let g = gen();
        let lex = Lexicon::standard();
        for seed in 0..2000 {
            let s = g.generate(seed).unwrap();
            let w = s.swapped(&lex).unwrap();
            let inv: Vec<_> = s.labels().iter().map(|l| l.inverted()).collect();
            assert_eq!(w.labels(), inv);
            assert_eq!(w.change, s.change);
            assert_eq!(w.prev, s.cur);
        }
    }

    #[test]
    fn change_flag_rules() {
        assert_eq!(assign_change_flag("effusion .", "effusion is worsened ."), ChangeAssessment::Change);
        assert_eq!(
            assign_change_flag(
                "The lungs are clear.",
                "A new left lower lobe consolidation is noted."
            ),
            ChangeAssessment::Change
        );
        assert_eq!(assign_change_flag("Left pleural effusion.", "No interval change."), ChangeAssessment::NoChange);
        assert_eq!(
            assign_change_flag("x", "Mild atelectasis remains unchanged. effusion is stable."),
            ChangeAssessment::NoChange
        );
        assert_eq!(assign_change_flag("x", "no effusion . no edema ."), ChangeAssessment::Abstain);
    }

    #[test]
    fn change_flag_agrees_with_generator() {
        let g = gen();
        let lex = Lexicon::standard();
        let (mut agreed, mut abstained) = (0, 0);
        for seed in 0..5000 {
            let s = g.generate(seed).unwrap();
            let text = lex.detokenize(&s.report);
            match assign_change_flag("prior study", &text).flag() {
                Some(c) => {
                    assert_eq!(c, s.change, "{text}");
                    agreed += 1;
                }
                None => abstained += 1,
            }
        }
        assert!(agreed > 4900, "{agreed} agreed, {abstained} abstained");
    }

    #[test]
    fn retrieval_worked_example() {
        let lex = Lexicon::standard();
        let report = lex
            .tokenize("pneumothorax is stable. consolidation is worsened.")
            .unwrap();
        let v = build_retrieval_variants(&report, Finding::Pneumothorax, &lex).unwrap();
        let text: Vec<String> = v.iter().map(|t| lex.detokenize(t)).collect();
        assert_eq!(
            text,
            [
                "pneumothorax is improved . consolidation is present .",
                "pneumothorax is stable . consolidation is present .",
                "pneumothorax is worsened . consolidation is present .",
            ]
        );
    }

    #[test]
    fn retrieval_absent_target_is_appended() {
        let lex = Lexicon::standard();
        let report = lex.tokenize("effusion is new. no edema.").unwrap();
        let v = build_retrieval_variants(&report, Finding::Pneumothorax, &lex).unwrap();
        assert_eq!(lex.detokenize(&v[0]), "effusion is present . no edema . pneumothorax is improved .");
        assert_eq!(lex.detokenize(&v[2]), "effusion is present . no edema . pneumothorax is worsened .");
        let v = build_retrieval_variants(&report, Finding::Edema, &lex).unwrap();
        assert_eq!(lex.detokenize(&v[1]), "effusion is present . edema is stable .");
        let bad = lex.tokenize("effusion is is.").unwrap();
        assert!(build_retrieval_variants(&bad, Finding::Edema, &lex).is_err());
    }

    #[test]
    fn retrieval_invariants_on_generated_reports() {
        let g = gen();
        let lex = Lexicon::standard();
        for seed in 0..500 {
            let s = g.generate(seed).unwrap();
            for f in Finding::ALL {
                let v = build_retrieval_variants(&s.report, f, &lex).unwrap();
                let a = lex.parse_report(&v[0]).unwrap();
                for other in &v[1..] {
                    let b = lex.parse_report(other).unwrap();
                    assert_eq!(a.len(), b.len());
                    let diffs: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).collect();
                    assert_eq!(diffs.len(), 1);
                    assert_eq!(diffs[0].0.finding, f);
                }
                if s.label(f) == Some(Stable) && s.states[f.index()].sentence().form == SentenceForm::Progression(Stable) {
                    let neutral = lex.encode_sentences(&neutralize(&s.report, f, &lex).unwrap()).unwrap();
                    assert_eq!(v[1], neutral);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            train_size: 5,
            test_size: 3,
            ..DataConfig::default()
        };
        let lex = Lexicon::standard();
        let data = generate_split(&cfg, Split::Test).unwrap();
        save_dataset(dir.path(), &data, &lex).unwrap();
        let back = load_dataset(dir.path(), Split::Test, &cfg.specs(), &lex).unwrap();
        assert_eq!(back, data);
        let again = generate_split(&cfg, Split::Test).unwrap();
        assert_eq!(again, data);
    }
}
