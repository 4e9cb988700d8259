//! Question-answering extraction of data-model values.
//!
//! One question is generated per model field. Documents longer than the
//! extractor's window are split into overlapping token chunks; each chunk is
//! asked separately and the most confident answer wins. Confidence is the
//! mean of the extractor's start and end confidences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::BackendError;
use crate::concerto::{ConcertoModel, DataInstance, FieldKind, ModelError, Value};
use crate::document::{tokenize, SourceDocument, Span};

pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_STRIDE: usize = 384;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QaError {
    #[error("stride {stride} must be in 1..={window}")]
    InvalidStride { window: usize, stride: usize },
    #[error("extractor span [{start}, {end}) lies outside its {len}-character context")]
    MisalignedSpan { start: usize, end: usize, len: usize },
    #[error("extractor confidence {0} is outside [0, 1]")]
    InvalidConfidence(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Chunking parameters, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub field_name: String,
    pub text: String,
    pub target_type: String,
}

/// A token window of the document and the character range it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub span: Span,
    /// Document text of `span`, before normalization.
    pub text: String,
    pub confidence: f64,
    pub chunk_index: usize,
}

/// What a span extractor returns for one (question, context) pair. Offsets
/// are character offsets into the context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub start: usize,
    pub end: usize,
    pub start_confidence: f64,
    pub end_confidence: f64,
}

/// An extractive question-answering model.
pub trait SpanExtractor: Send + Sync {
    /// Stable identifier recorded in conversion provenance.
    fn id(&self) -> String;

    /// Answers `question` from `context`, or `None` to abstain.
    fn answer(&self, question: &str, context: &str) -> Result<Option<ExtractedSpan>, BackendError>;
}

/// Mean of the start and end confidences.
pub fn confidence(start_confidence: f64, end_confidence: f64) -> f64 {
    (start_confidence + end_confidence) / 2.0
}

/// Splits a camelCase or snake_case identifier into lowercase words.
pub fn human_form(field_name: &str) -> String {
    let chars: Vec<char> = field_name.chars().collect();
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == '-' || c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        if c.is_uppercase() && !current.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower) {
                words.push(std::mem::take(&mut current));
            }
        }
        current.extend(c.to_lowercase());
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

/// Builds the question for a field, choosing the interrogative by type.
pub fn generate_question(field_name: &str, target_type: &str) -> Question {
    let prefix = match target_type {
        "Party" => "Who is the",
        "DateTime" | "TemporalUnit" => "When is the",
        "MonetaryAmount" => "How much is the",
        _ => "What is the",
    };
    Question {
        field_name: field_name.to_string(),
        text: format!("{prefix} {}?", human_form(field_name)),
        target_type: target_type.to_string(),
    }
}

/// Windows of `window` tokens advancing by `stride`, stopping at the first
/// window that reaches the end. Short documents get exactly one chunk.
pub fn chunk_document(document: &SourceDocument, config: ChunkConfig) -> Result<Vec<Chunk>, QaError> {
    let ChunkConfig { window, stride } = config;
    if stride == 0 || stride > window {
        return Err(QaError::InvalidStride { window, stride });
    }
    let tokens = document.tokens();
    let n = tokens.len();
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(n);
        let (char_start, char_end) = if start < end {
            (tokens[start].start, tokens[end - 1].end)
        } else {
            (0, 0)
        };
        chunks.push(Chunk {
            token_start: start,
            token_end: end,
            char_start,
            char_end,
        });
        if end >= n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

fn check_confidence(c: f64) -> Result<(), QaError> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(QaError::InvalidConfidence(c.to_string()))
    }
}

/// Asks the extractor once per chunk and keeps the best answer.
///
/// Ties on confidence go to the earlier document offset, then the lower
/// chunk index. Empty spans count as abstentions.
pub fn extract_field(
    question: &Question,
    document: &SourceDocument,
    extractor: &dyn SpanExtractor,
    config: ChunkConfig,
) -> Result<Option<Answer>, QaError> {
    let chunks = chunk_document(document, config)?;
    let mut best: Option<Answer> = None;
    for (chunk_index, chunk) in chunks.iter().enumerate() {
        let context = document
            .slice(chunk.char_start, chunk.char_end)
            .expect("chunk bounds come from the document's tokens");
        let Some(found) = extractor.answer(&question.text, context)? else {
            continue;
        };
        let len = chunk.char_end - chunk.char_start;
        if found.start > found.end || found.end > len {
            return Err(QaError::MisalignedSpan {
                start: found.start,
                end: found.end,
                len,
            });
        }
        check_confidence(found.start_confidence)?;
        check_confidence(found.end_confidence)?;
        if found.start == found.end {
            continue;
        }
        let span = Span {
            start: chunk.char_start + found.start,
            end: chunk.char_start + found.end,
        };
        let candidate = Answer {
            span,
            text: document.slice(span.start, span.end).unwrap_or_default().to_string(),
            confidence: confidence(found.start_confidence, found.end_confidence),
            chunk_index,
        };
        let better = match &best {
            None => true,
            Some(current) => candidate
                .confidence
                .total_cmp(&current.confidence)
                .then_with(|| current.span.start.cmp(&candidate.span.start))
                .then_with(|| current.chunk_index.cmp(&candidate.chunk_index))
                .is_gt(),
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best)
}

const DETERMINERS: [&str; 3] = ["the", "an", "a"];

/// Strips one leading determiner and any trailing sentence punctuation.
pub fn normalize_answer(text: &str) -> String {
    let mut rest = text.trim();
    for det in DETERMINERS {
        let Some(head) = rest.get(..det.len()) else {
            continue;
        };
        let tail = &rest[det.len()..];
        if head.eq_ignore_ascii_case(det) && tail.starts_with(char::is_whitespace) {
            rest = tail.trim_start();
            break;
        }
    }
    rest.trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '!' | '?') || c.is_whitespace())
        .to_string()
}

/// Converts answer text into a value of the field's type. Text that does
/// not parse as the target primitive is kept as a string.
pub fn coerce_value(text: &str, type_name: &str, kind: FieldKind) -> Value {
    if kind == FieldKind::Relationship {
        return Value::Reference(text.to_string());
    }
    match type_name {
        "Integer" => text
            .parse::<i64>()
            .map(|n| Value::Number(n.into()))
            .unwrap_or_else(|_| Value::String(text.to_string())),
        "Double" => text
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .unwrap_or_else(|| Value::String(text.to_string())),
        "Boolean" => match text.to_ascii_lowercase().as_str() {
            "true" | "yes" => Value::Boolean(true),
            "false" | "no" => Value::Boolean(false),
            _ => Value::String(text.to_string()),
        },
        _ => Value::String(text.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FillResult {
    pub instance: DataInstance,
    pub confidences: BTreeMap<String, f64>,
    /// Raw answers per field, before normalization.
    pub answers: BTreeMap<String, Answer>,
    /// Fields every chunk abstained on.
    pub missing: Vec<String>,
}

/// Extracts every effective field of `class_name` from the document.
pub fn fill_instance(
    model: &ConcertoModel,
    class_name: &str,
    document: &SourceDocument,
    extractor: &dyn SpanExtractor,
    config: ChunkConfig,
) -> Result<FillResult, QaError> {
    let fields = model.effective_fields(class_name)?;
    let mut result = FillResult {
        instance: DataInstance::new(class_name),
        ..FillResult::default()
    };
    for field in fields {
        let question = generate_question(&field.name, &field.type_name);
        match extract_field(&question, document, extractor, config)? {
            Some(answer) => {
                let value = coerce_value(&normalize_answer(&answer.text), &field.type_name, field.kind);
                result.instance.values.insert(field.name.clone(), value);
                result.confidences.insert(field.name.clone(), answer.confidence);
                result.answers.insert(field.name, answer);
            }
            None => result.missing.push(field.name),
        }
    }
    Ok(result)
}

/// Answer-key extractor: finds a known phrase in the context.
///
/// Keys are either exact question texts or field names; a field name
/// applies when its human form appears in the question (longest match
/// wins). The phrase is matched case-insensitively on token boundaries and
/// the first occurrence is returned with confidence 1.0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BaselineExtractor {
    answers: BTreeMap<String, String>,
}

impl BaselineExtractor {
    pub fn new(answers: BTreeMap<String, String>) -> Self {
        Self { answers }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    pub fn answers(&self) -> &BTreeMap<String, String> {
        &self.answers
    }

    fn phrase_for(&self, question: &str) -> Option<&str> {
        if let Some(exact) = self.answers.get(question) {
            return Some(exact);
        }
        let question_words: Vec<String> = tokenize(&question.to_lowercase())
            .into_iter()
            .map(|t| t.surface)
            .collect();
        self.answers
            .iter()
            .filter_map(|(key, phrase)| {
                let words: Vec<String> = human_form(key).split(' ').map(str::to_string).collect();
                let found = !words.is_empty()
                    && question_words
                        .windows(words.len())
                        .any(|w| w == words.as_slice());
                found.then_some((words.len(), key, phrase))
            })
            // longest human form, then smallest key
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(a.1)))
            .map(|(_, _, phrase)| phrase.as_str())
    }
}

/// First case-insensitive, token-aligned occurrence of `phrase` in
/// `context`, as character offsets.
pub fn find_phrase(context: &str, phrase: &str) -> Option<Span> {
    let needle: Vec<char> = phrase.trim().chars().collect();
    if needle.is_empty() {
        return None;
    }
    let tokens = tokenize(context);
    let hay: Vec<char> = context.chars().collect();
    let eq = |a: char, b: char| a == b || a.to_lowercase().eq(b.to_lowercase());
    for (ti, token) in tokens.iter().enumerate() {
        let start = token.start;
        let end = start + needle.len();
        if end > hay.len() || !hay[start..end].iter().zip(&needle).all(|(&a, &b)| eq(a, b)) {
            continue;
        }
        if tokens[ti..].iter().any(|t| t.end == end) {
            return Some(Span { start, end });
        }
    }
    None
}

impl SpanExtractor for BaselineExtractor {
    fn id(&self) -> String {
        let canonical = serde_json::to_string(&self.answers).expect("string map serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("baseline-{hex}")
    }

    fn answer(&self, question: &str, context: &str) -> Result<Option<ExtractedSpan>, BackendError> {
        Ok(self
            .phrase_for(question)
            .and_then(|phrase| find_phrase(context, phrase))
            .map(|span| ExtractedSpan {
                start: span.start,
                end: span.end,
                start_confidence: 1.0,
                end_confidence: 1.0,
            }))
    }
}
