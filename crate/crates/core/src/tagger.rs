//! Multi-label entity tagging and Cicero mark proposals.
//!
//! A [`Tagger`] scores every token independently per label with a `B`
//! (begins a span) and an `I` (continues a span) probability. There is no
//! softmax across labels, so one token can be a likely `Party` and a likely
//! `Object` at the same time; the overlap is resolved by the user, not here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::BackendError;
use crate::document::{
    is_identifier, tokenize, CharIndex, EntityLabel, LabeledSpan, SourceDocument, Span, Token,
    VariableBinding,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaggerError {
    #[error("malformed CoNLL tag `{0}`")]
    MalformedTag(String),
    #[error("invalid pattern for {label}: {message}")]
    InvalidPattern { label: String, message: String },
    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(String),
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(String),
    #[error("version `{version}` of {label} is already registered")]
    DuplicateVersion { label: String, version: String },
    #[error("no tagger version registered for label {0}")]
    UnknownLabel(String),
    #[error("version `{version}` of {label} is not registered")]
    UnknownVersion { label: String, version: String },
}

/// A decode threshold strictly between 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self, TaggerError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(TaggerError::InvalidThreshold(value.to_string()))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(DEFAULT_THRESHOLD)
    }
}

impl TryFrom<f64> for Threshold {
    type Error = TaggerError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Threshold::new(value)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

/// Maps a CoNLL-style tag onto SLC data types.
///
/// Every entity tag yields `String`; person, organization and place tags
/// add `Party`, artifact/misc/natural-phenomenon tags add `Object` and time
/// tags add `TemporalUnit`. Entity types compare case-insensitively.
pub fn aggregate_label(conll_tag: &str) -> Result<BTreeSet<EntityLabel>, TaggerError> {
    if conll_tag == "O" {
        return Ok(BTreeSet::new());
    }
    let entity = conll_tag
        .strip_prefix("B-")
        .or_else(|| conll_tag.strip_prefix("I-"))
        .filter(|e| !e.is_empty() && e.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .ok_or_else(|| TaggerError::MalformedTag(conll_tag.to_string()))?;

    let mut labels = BTreeSet::from([EntityLabel::string()]);
    match entity.to_ascii_lowercase().as_str() {
        "per" | "org" | "geo" | "gpe" => {
            labels.insert(EntityLabel::party());
        }
        "art" | "misc" | "nat" => {
            labels.insert(EntityLabel::object());
        }
        "tim" => {
            labels.insert(EntityLabel::temporal_unit());
        }
        _ => {}
    }
    Ok(labels)
}

/// Concerto type used for a proposed binding of `label`.
pub fn concerto_type_for(label: &EntityLabel) -> &'static str {
    match label.as_str() {
        EntityLabel::PARTY => "Party",
        EntityLabel::TEMPORAL_UNIT => "DateTime",
        _ => "String",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BioScores {
    pub b: f64,
    pub i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub start: usize,
    pub end: usize,
    pub labels: BTreeMap<EntityLabel, BioScores>,
}

/// Per-token, per-label independent `B`/`I` probabilities.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TokenLabelMatrix {
    rows: Vec<TokenScores>,
}

fn check_probability(p: f64) -> Result<(), TaggerError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(TaggerError::InvalidProbability(p.to_string()))
    }
}

impl TokenLabelMatrix {
    /// An all-zero matrix over `tokens`.
    pub fn zeros(tokens: &[Token]) -> Self {
        Self {
            rows: tokens
                .iter()
                .map(|t| TokenScores {
                    start: t.start,
                    end: t.end,
                    labels: BTreeMap::new(),
                })
                .collect(),
        }
    }

    pub fn from_rows(rows: Vec<TokenScores>) -> Result<Self, TaggerError> {
        for row in &rows {
            for scores in row.labels.values() {
                check_probability(scores.b)?;
                check_probability(scores.i)?;
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[TokenScores] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sets scores for one token, keeping the larger of old and new.
    pub fn raise(&mut self, token: usize, label: &EntityLabel, b: f64, i: f64) -> Result<(), TaggerError> {
        check_probability(b)?;
        check_probability(i)?;
        let entry = self.rows[token].labels.entry(label.clone()).or_default();
        entry.b = entry.b.max(b);
        entry.i = entry.i.max(i);
        Ok(())
    }

    fn labels(&self) -> BTreeSet<&EntityLabel> {
        self.rows.iter().flat_map(|r| r.labels.keys()).collect()
    }
}

/// Greedy BIO decoding, run independently per label.
///
/// A span opens on a token whose `B` probability reaches the threshold and
/// extends while the next token's `I` probability does. Its probability is
/// the mean of the opening `B` and continuing `I` probabilities. Output is
/// ordered by start, then label.
pub fn decode_spans(matrix: &TokenLabelMatrix, threshold: Threshold) -> Vec<LabeledSpan> {
    let t = threshold.value();
    let mut spans = Vec::new();
    for label in matrix.labels() {
        let mut open: Option<(usize, usize, Vec<f64>)> = None;
        for row in &matrix.rows {
            let scores = row.labels.get(label).copied().unwrap_or_default();
            if let Some((_, end, probs)) = open.as_mut() {
                if scores.i >= t {
                    *end = row.end;
                    probs.push(scores.i);
                    continue;
                }
                let (start, end, probs) = open.take().expect("span is open");
                spans.push(finish(start, end, label, &probs));
            }
            if scores.b >= t {
                open = Some((row.start, row.end, vec![scores.b]));
            }
        }
        if let Some((start, end, probs)) = open {
            spans.push(finish(start, end, label, &probs));
        }
    }
    spans.sort_by(|a, b| (a.start, &a.label, a.end).cmp(&(b.start, &b.label, b.end)));
    spans
}

fn finish(start: usize, end: usize, label: &EntityLabel, probs: &[f64]) -> LabeledSpan {
    LabeledSpan {
        start,
        end,
        label: label.clone(),
        probability: probs.iter().sum::<f64>() / probs.len() as f64,
    }
}

/// A per-label entity scorer.
pub trait Tagger: Send + Sync {
    /// Scores `tokens`, which must be the tokenization of `text`.
    fn tag(&self, text: &str, tokens: &[Token]) -> Result<TokenLabelMatrix, BackendError>;

    /// The version of the model behind each label this tagger scores.
    fn versions(&self) -> BTreeMap<EntityLabel, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerSource {
    Baseline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerVersion {
    pub label: EntityLabel,
    pub version: String,
    pub source: TaggerSource,
}

/// Known tagger versions per label, in registration order.
#[derive(Debug, Clone, Default)]
pub struct VersionRegistry {
    versions: BTreeMap<EntityLabel, Vec<TaggerVersion>>,
}

impl VersionRegistry {
    pub fn register(&mut self, label: EntityLabel, version: &str, source: TaggerSource) -> Result<(), TaggerError> {
        let entries = self.versions.entry(label.clone()).or_default();
        if entries.iter().any(|v| v.version == version) {
            return Err(TaggerError::DuplicateVersion {
                label: label.to_string(),
                version: version.to_string(),
            });
        }
        entries.push(TaggerVersion {
            label,
            version: version.to_string(),
            source,
        });
        Ok(())
    }

    pub fn versions(&self, label: &EntityLabel) -> &[TaggerVersion] {
        self.versions.get(label).map(Vec::as_slice).unwrap_or_default()
    }

    /// The pinned version for each label, or the most recently registered.
    pub fn resolve(
        &self,
        labels: &[EntityLabel],
        pins: &BTreeMap<EntityLabel, String>,
    ) -> Result<BTreeMap<EntityLabel, String>, TaggerError> {
        let mut resolved = BTreeMap::new();
        for label in labels {
            let entries = self.versions(label);
            let latest = entries
                .last()
                .ok_or_else(|| TaggerError::UnknownLabel(label.to_string()))?;
            let version = match pins.get(label) {
                Some(pin) if entries.iter().any(|v| &v.version == pin) => pin.clone(),
                Some(pin) => {
                    return Err(TaggerError::UnknownVersion {
                        label: label.to_string(),
                        version: pin.clone(),
                    })
                }
                None => latest.version.clone(),
            };
            resolved.insert(label.clone(), version);
        }
        Ok(resolved)
    }
}

/// Gazetteer phrases and regular expressions per label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(default)]
    pub gazetteers: BTreeMap<EntityLabel, BTreeSet<String>>,
    #[serde(default)]
    pub patterns: BTreeMap<EntityLabel, Vec<String>>,
}

impl BaselineConfig {
    pub fn with_phrases<'a>(mut self, label: EntityLabel, phrases: impl IntoIterator<Item = &'a str>) -> Self {
        self.gazetteers
            .entry(label)
            .or_default()
            .extend(phrases.into_iter().map(str::to_string));
        self
    }

    pub fn with_pattern(mut self, label: EntityLabel, pattern: &str) -> Self {
        self.patterns.entry(label).or_default().push(pattern.to_string());
        self
    }
}

/// Deterministic dictionary-and-regex tagger. Matches score 1.0, all else 0.
#[derive(Debug, Clone)]
pub struct BaselineTagger {
    config: BaselineConfig,
    gazetteers: BTreeMap<EntityLabel, Vec<Vec<String>>>,
    patterns: BTreeMap<EntityLabel, Vec<Regex>>,
}

impl BaselineTagger {
    pub fn new(config: BaselineConfig) -> Result<Self, TaggerError> {
        let mut patterns = BTreeMap::new();
        for (label, sources) in &config.patterns {
            let compiled = sources
                .iter()
                .map(|p| {
                    Regex::new(p).map_err(|e| TaggerError::InvalidPattern {
                        label: label.to_string(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            patterns.insert(label.clone(), compiled);
        }
        let gazetteers = config
            .gazetteers
            .iter()
            .map(|(label, phrases)| {
                let tokenized = phrases
                    .iter()
                    .map(|p| tokenize(p).into_iter().map(|t| t.surface).collect::<Vec<_>>())
                    .filter(|p| !p.is_empty())
                    .collect();
                (label.clone(), tokenized)
            })
            .collect();
        Ok(Self {
            config,
            gazetteers,
            patterns,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    fn labels(&self) -> BTreeSet<&EntityLabel> {
        self.config
            .gazetteers
            .keys()
            .chain(self.config.patterns.keys())
            .collect()
    }
}

impl Tagger for BaselineTagger {
    fn tag(&self, text: &str, tokens: &[Token]) -> Result<TokenLabelMatrix, BackendError> {
        let mut matrix = TokenLabelMatrix::zeros(tokens);
        let mut mark = |label: &EntityLabel, first: usize, last: usize| {
            for k in first..=last {
                let (b, i) = if k == first { (1.0, 0.0) } else { (0.0, 1.0) };
                matrix.raise(k, label, b, i).expect("unit probabilities");
            }
        };

        for (label, phrases) in &self.gazetteers {
            for phrase in phrases {
                for start in 0..tokens.len() {
                    let window = tokens.get(start..start + phrase.len());
                    let hit = window.is_some_and(|w| w.iter().zip(phrase).all(|(t, p)| &t.surface == p));
                    if hit {
                        mark(label, start, start + phrase.len() - 1);
                    }
                }
            }
        }

        if !self.patterns.is_empty() {
            let index = CharIndex::new(text);
            for (label, regexes) in &self.patterns {
                for re in regexes {
                    for m in re.find_iter(text) {
                        if m.start() == m.end() {
                            continue;
                        }
                        let (Some(cs), Some(ce)) = (index.char_offset(m.start()), index.char_offset(m.end())) else {
                            continue;
                        };
                        let first = tokens.binary_search_by_key(&cs, |t| t.start);
                        let last = tokens.binary_search_by_key(&ce, |t| t.end);
                        if let (Ok(first), Ok(last)) = (first, last) {
                            mark(label, first, last);
                        }
                    }
                }
            }
        }
        Ok(matrix)
    }

    fn versions(&self) -> BTreeMap<EntityLabel, String> {
        self.labels()
            .into_iter()
            .map(|label| {
                let mut hasher = Sha256::new();
                for phrase in self.config.gazetteers.get(label).into_iter().flatten() {
                    hasher.update(b"g\0");
                    hasher.update(phrase.as_bytes());
                    hasher.update(b"\0");
                }
                for pattern in self.config.patterns.get(label).into_iter().flatten() {
                    hasher.update(b"p\0");
                    hasher.update(pattern.as_bytes());
                    hasher.update(b"\0");
                }
                let digest = hasher.finalize();
                let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
                (label.clone(), format!("baseline-{hex}"))
            })
            .collect()
    }
}

/// Runs the baseline rules directly over a token stream.
pub fn baseline_tag(text: &str, tokens: &[Token], config: &BaselineConfig) -> Result<TokenLabelMatrix, TaggerError> {
    let tagger = BaselineTagger::new(config.clone())?;
    Ok(tagger.tag(text, tokens).expect("baseline tagging is infallible"))
}

/// Candidate marks plus the tagger versions that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkProposal {
    pub bindings: Vec<VariableBinding>,
    pub tagger_versions: BTreeMap<EntityLabel, String>,
}

fn name_stem(label: &EntityLabel) -> String {
    let stem: String = label
        .as_str()
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .collect::<String>()
        .to_ascii_lowercase();
    if is_identifier(&stem) {
        stem
    } else {
        format!("mark{stem}")
    }
}

// Higher wins when candidates overlap.
fn specificity(label: &EntityLabel) -> u8 {
    match label.as_str() {
        EntityLabel::STRING => 0,
        _ => 1,
    }
}

/// Marks the highest-priority non-overlapping candidates as accepted:
/// higher probability first, then specific labels over `String`, then the
/// earlier span.
pub fn resolve_overlaps(bindings: &mut [VariableBinding]) {
    let mut order: Vec<usize> = (0..bindings.len()).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = (&bindings[x].span, &bindings[y].span);
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| specificity(&b.label).cmp(&specificity(&a.label)))
            .then_with(|| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)))
    });
    let mut taken: Vec<usize> = Vec::new();
    for idx in order {
        let clash = taken.iter().any(|&t| bindings[t].span.overlaps(&bindings[idx].span));
        bindings[idx].accepted = !clash;
        if !clash {
            taken.push(idx);
        }
    }
}

/// Tags the document and turns decoded spans into candidate bindings.
///
/// Repeated surface forms under one label collapse into the first
/// occurrence; later ones are listed in `occurrences`. Names are the label
/// lowercased plus a per-label ordinal (`party1`, `party2`, ...).
pub fn propose_marks(
    document: &SourceDocument,
    tagger: &dyn Tagger,
    threshold: Threshold,
) -> Result<MarkProposal, BackendError> {
    let tagger_versions = tagger.versions();
    let matrix = tagger.tag(document.text(), document.tokens())?;
    if matrix.len() != document.tokens().len() {
        return Err(BackendError::ProtocolViolation(format!(
            "tagger scored {} tokens, document has {}",
            matrix.len(),
            document.tokens().len()
        )));
    }
    let spans = decode_spans(&matrix, threshold);

    let mut bindings: Vec<VariableBinding> = Vec::new();
    let mut by_surface: BTreeMap<(EntityLabel, String), usize> = BTreeMap::new();
    let mut counters: BTreeMap<EntityLabel, usize> = BTreeMap::new();
    for span in spans {
        let surface = document.slice(span.start, span.end).unwrap_or_default().to_string();
        let key = (span.label.clone(), surface);
        if let Some(&existing) = by_surface.get(&key) {
            bindings[existing].occurrences.push(Span {
                start: span.start,
                end: span.end,
            });
            continue;
        }
        let ordinal = counters.entry(span.label.clone()).or_default();
        *ordinal += 1;
        by_surface.insert(key, bindings.len());
        bindings.push(VariableBinding {
            variable_name: format!("{}{}", name_stem(&span.label), ordinal),
            concerto_type: concerto_type_for(&span.label).to_string(),
            raw: false,
            accepted: true,
            occurrences: Vec::new(),
            span,
        });
    }
    resolve_overlaps(&mut bindings);
    Ok(MarkProposal {
        bindings,
        tagger_versions,
    })
}

impl fmt::Display for TaggerSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaggerSource::Baseline => "baseline",
            TaggerSource::Remote => "remote",
        })
    }
}
