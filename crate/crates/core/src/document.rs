//! Source documents, tokens and the span types shared by every stage.
//!
//! All offsets in this crate are Unicode scalar value (character) offsets,
//! never byte offsets. [`SourceDocument`] keeps a char-to-byte table so
//! slicing by character range stays cheap on long contracts.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A whitespace-free run of text with its `[start, end)` character range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    OpenBrace,
    CloseBrace,
    Punct,
    Space,
}

fn classify(c: char) -> CharClass {
    match c {
        '{' => CharClass::OpenBrace,
        '}' => CharClass::CloseBrace,
        c if c.is_whitespace() => CharClass::Space,
        c if c.is_alphanumeric() || c == '_' => CharClass::Word,
        _ => CharClass::Punct,
    }
}

/// Splits text into tokens.
///
/// Whitespace separates tokens and is never part of one. Runs of letters,
/// digits and underscores form word tokens, maximal runs of `{` or `}` form
/// brace tokens, and every other character is a token on its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(CharClass, usize, String)> = None;

    for (pos, c) in text.chars().enumerate() {
        let class = classify(c);
        if let Some((cur_class, start, surface)) = current.as_mut() {
            let joins = *cur_class == class && class != CharClass::Punct;
            if joins {
                surface.push(c);
                continue;
            }
            let end = pos;
            tokens.push(Token {
                surface: std::mem::take(surface),
                start: *start,
                end,
            });
            current = None;
        }
        if class != CharClass::Space {
            current = Some((class, pos, c.to_string()));
        }
    }
    if let Some((_, start, surface)) = current {
        let end = start + surface.chars().count();
        tokens.push(Token { surface, start, end });
    }
    tokens
}

/// Maps character offsets of a string to byte offsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CharIndex {
    // byte offset of every char, plus the total byte length at the end
    offsets: Vec<usize>,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        offsets.push(text.len());
        Self { offsets }
    }

    /// Number of characters in the indexed text.
    pub fn char_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn byte_offset(&self, char_offset: usize) -> Option<usize> {
        self.offsets.get(char_offset).copied()
    }

    /// Converts a byte offset on a char boundary back to a char offset.
    pub fn char_offset(&self, byte_offset: usize) -> Option<usize> {
        self.offsets.binary_search(&byte_offset).ok()
    }
}

/// Slices `text` by character range. Returns `None` if the range is out of
/// bounds or reversed.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut iter = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let begin = iter.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        iter.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

/// Raw contract text plus its deterministic token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRepr", into = "DocumentRepr")]
pub struct SourceDocument {
    id: String,
    text: String,
    tokens: Vec<Token>,
    index: CharIndex,
}

#[derive(Serialize, Deserialize)]
struct DocumentRepr {
    id: String,
    text: String,
    tokens: Vec<Token>,
}

impl TryFrom<DocumentRepr> for SourceDocument {
    type Error = String;

    fn try_from(repr: DocumentRepr) -> Result<Self, Self::Error> {
        let doc = SourceDocument::with_id(repr.id, repr.text);
        if doc.tokens != repr.tokens {
            return Err("token stream does not match the document text".to_string());
        }
        Ok(doc)
    }
}

impl From<SourceDocument> for DocumentRepr {
    fn from(doc: SourceDocument) -> Self {
        DocumentRepr {
            id: doc.id,
            text: doc.text,
            tokens: doc.tokens,
        }
    }
}

impl SourceDocument {
    /// Creates a document with a fresh UUID identifier.
    pub fn new(text: impl Into<String>) -> Self {
        Self::with_id(uuid::Uuid::new_v4().to_string(), text)
    }

    pub fn with_id(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        let index = CharIndex::new(&text);
        Self {
            id: id.into(),
            text,
            tokens,
            index,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn char_len(&self) -> usize {
        self.index.char_len()
    }

    /// Text of the character range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        if start > end {
            return None;
        }
        let b0 = self.index.byte_offset(start)?;
        let b1 = self.index.byte_offset(end)?;
        Some(&self.text[b0..b1])
    }

    /// True when `[start, end)` starts at a token start and ends at a token end.
    pub fn is_token_aligned(&self, start: usize, end: usize) -> bool {
        start < end && self.token_index_starting_at(start).is_some() && self.token_index_ending_at(end).is_some()
    }

    pub fn token_index_starting_at(&self, start: usize) -> Option<usize> {
        self.tokens.binary_search_by_key(&start, |t| t.start).ok()
    }

    pub fn token_index_ending_at(&self, end: usize) -> Option<usize> {
        self.tokens.binary_search_by_key(&end, |t| t.end).ok()
    }
}

/// An entity type a tagger can propose.
///
/// The four built-in labels always exist; users may register more with a
/// [`LabelRegistry`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityLabel(String);

impl EntityLabel {
    pub const STRING: &'static str = "String";
    pub const PARTY: &'static str = "Party";
    pub const OBJECT: &'static str = "Object";
    pub const TEMPORAL_UNIT: &'static str = "TemporalUnit";

    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn string() -> Self {
        Self::new(Self::STRING)
    }

    pub fn party() -> Self {
        Self::new(Self::PARTY)
    }

    pub fn object() -> Self {
        Self::new(Self::OBJECT)
    }

    pub fn temporal_unit() -> Self {
        Self::new(Self::TEMPORAL_UNIT)
    }

    pub fn builtins() -> [EntityLabel; 4] {
        [
            Self::string(),
            Self::party(),
            Self::object(),
            Self::temporal_unit(),
        ]
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_builtin(&self) -> bool {
        matches!(
            self.0.as_str(),
            Self::STRING | Self::PARTY | Self::OBJECT | Self::TEMPORAL_UNIT
        )
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("label `{0}` is already registered")]
    DuplicateLabel(String),
    #[error("`{0}` is not a valid label name")]
    InvalidName(String),
}

/// The set of labels known to the system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRegistry {
    labels: BTreeSet<EntityLabel>,
}

impl Default for LabelRegistry {
    fn default() -> Self {
        Self {
            labels: EntityLabel::builtins().into_iter().collect(),
        }
    }
}

impl LabelRegistry {
    pub fn register(&mut self, name: &str) -> Result<EntityLabel, LabelError> {
        if !is_identifier(name) {
            return Err(LabelError::InvalidName(name.to_string()));
        }
        let label = EntityLabel::new(name);
        if !self.labels.insert(label.clone()) {
            return Err(LabelError::DuplicateLabel(name.to_string()));
        }
        Ok(label)
    }

    pub fn contains(&self, label: &EntityLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &EntityLabel> {
        self.labels.iter()
    }
}

/// `[A-Za-z][A-Za-z0-9_]*`
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => chars.all(|c| c.is_ascii_alphanumeric() || c == '_'),
        _ => false,
    }
}

/// A character range, used for secondary occurrences and answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// A typed, scored entity proposal over a token-aligned character range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityLabel,
    pub probability: f64,
}

impl LabeledSpan {
    pub fn range(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
        }
    }

    pub fn overlaps(&self, other: &LabeledSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A Cicero variable bound to a span of the source document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableBinding {
    pub span: LabeledSpan,
    pub variable_name: String,
    pub concerto_type: String,
    /// Triple-brace flag.
    #[serde(default)]
    pub raw: bool,
    /// Whether the binding is part of the accepted mark set. Rejected
    /// candidates are kept so the user can toggle them back on.
    #[serde(default = "default_true")]
    pub accepted: bool,
    /// Later occurrences of the same surface form, left as literal text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub occurrences: Vec<Span>,
}

fn default_true() -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t ").is_empty());
    }

    #[test]
    fn words_and_punctuation() {
        let tokens = tokenize("Bob pays Alice.");
        assert_eq!(surfaces(&tokens), ["Bob", "pays", "Alice", "."]);
        let ranges: Vec<_> = tokens.iter().map(|t| (t.start, t.end)).collect();
        assert_eq!(ranges, [(0, 3), (4, 8), (9, 14), (14, 15)]);
    }

    #[test]
    fn brace_runs_are_single_tokens() {
        assert_eq!(surfaces(&tokenize("{{buyer}}")), ["{{", "buyer", "}}"]);
        assert_eq!(surfaces(&tokenize("{{{fee}}}.")), ["{{{", "fee", "}}}", "."]);
    }

    #[test]
    fn punctuation_is_never_merged() {
        assert_eq!(surfaces(&tokenize("a--b")), ["a", "-", "-", "b"]);
        assert_eq!(surfaces(&tokenize("Alice's")), ["Alice", "'", "s"]);
    }

    #[test]
    fn offsets_are_characters_not_bytes() {
        let tokens = tokenize("Zoë paid €20");
        assert_eq!(surfaces(&tokens), ["Zoë", "paid", "€", "20"]);
        assert_eq!((tokens[0].start, tokens[0].end), (0, 3));
        assert_eq!((tokens[2].start, tokens[2].end), (9, 10));
    }

    #[test]
    fn document_slices_by_chars() {
        let doc = SourceDocument::new("Zoë paid €20");
        assert_eq!(doc.slice(9, 12), Some("€20"));
        assert_eq!(doc.slice(0, 0), Some(""));
        assert_eq!(doc.slice(5, 13), None);
        assert_eq!(char_slice("Zoë paid €20", 9, 12), Some("€20"));
        assert_eq!(char_slice("abc", 3, 3), Some(""));
        assert_eq!(char_slice("abc", 2, 4), None);
    }

    #[test]
    fn token_alignment() {
        let doc = SourceDocument::new("Bob Smith pays");
        assert!(doc.is_token_aligned(0, 9));
        assert!(!doc.is_token_aligned(0, 2));
        assert!(!doc.is_token_aligned(3, 9));
        assert!(!doc.is_token_aligned(4, 4));
    }

    #[test]
    fn document_serde_rejects_tampered_tokens() {
        let doc = SourceDocument::with_id("d1", "Bob pays");
        let mut json: serde_json::Value = serde_json::to_value(&doc).unwrap();
        let back: SourceDocument = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, doc);
        json["tokens"][0]["end"] = 2.into();
        assert!(serde_json::from_value::<SourceDocument>(json).is_err());
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("costOfGoods"));
        assert!(is_identifier("party_1"));
        assert!(!is_identifier("1party"));
        assert!(!is_identifier("_x"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("a b"));
    }

    #[test]
    fn label_registry_keeps_builtins_unique() {
        let mut reg = LabelRegistry::default();
        for label in EntityLabel::builtins() {
            assert!(reg.contains(&label));
        }
        assert_eq!(
            reg.register("Party"),
            Err(LabelError::DuplicateLabel("Party".into()))
        );
        let loc = reg.register("Location").unwrap();
        assert!(reg.contains(&loc));
        assert!(!loc.is_builtin());
        assert!(reg.register("not valid").is_err());
    }
}
