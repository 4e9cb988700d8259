//! Cicero natural-language templates.
//!
//! Only the two variable forms are supported: `{{name}}` and the raw,
//! triple-brace `{{{name}}}`. Literal text may not contain braces at all,
//! so every template has exactly one textual form and parsing is lossless.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::document::{is_identifier, SourceDocument, VariableBinding};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unbalanced braces at offset {0}")]
    UnbalancedBraces(usize),
    #[error("empty variable name at offset {0}")]
    EmptyVariableName(usize),
    #[error("invalid variable name `{name}` at offset {position}")]
    InvalidVariableName { position: usize, name: String },
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("nested braces at offset {0}")]
    NestedBraces(usize),
    #[error("no value supplied for variable `{0}`")]
    MissingValue(String),
    #[error("marks [{}, {}) and [{}, {}) overlap", .0.0, .0.1, .1.0, .1.1)]
    OverlappingMarks((usize, usize), (usize, usize)),
    #[error("mark [{0}, {1}) is not aligned to token boundaries")]
    UnalignedMark(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Literal { text: String },
    Variable { name: String, raw: bool },
}

impl Segment {
    pub fn literal(text: impl Into<String>) -> Self {
        Segment::Literal { text: text.into() }
    }

    pub fn variable(name: impl Into<String>, raw: bool) -> Self {
        Segment::Variable {
            name: name.into(),
            raw,
        }
    }
}

/// A normalized sequence of literal and variable segments.
///
/// Adjacent literals are merged, empty literals dropped, and variable names
/// are unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct CiceroTemplate {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for CiceroTemplate {
    type Error = TemplateError;

    fn try_from(segments: Vec<Segment>) -> Result<Self, Self::Error> {
        CiceroTemplate::new(segments)
    }
}

impl From<CiceroTemplate> for Vec<Segment> {
    fn from(t: CiceroTemplate) -> Self {
        t.segments
    }
}

impl CiceroTemplate {
    /// Builds a template from raw segments, normalizing literals.
    ///
    /// Fails if a variable name is not an identifier, appears twice, or a
    /// literal contains a brace.
    pub fn new(segments: impl IntoIterator<Item = Segment>) -> Result<Self, TemplateError> {
        let mut out: Vec<Segment> = Vec::new();
        let mut names = BTreeSet::new();
        let mut offset = 0usize;
        for segment in segments {
            match segment {
                Segment::Literal { text } => {
                    if let Some(i) = text.chars().position(|c| c == '{' || c == '}') {
                        return Err(TemplateError::UnbalancedBraces(offset + i));
                    }
                    offset += text.chars().count();
                    if text.is_empty() {
                        continue;
                    }
                    if let Some(Segment::Literal { text: prev }) = out.last_mut() {
                        prev.push_str(&text);
                    } else {
                        out.push(Segment::Literal { text });
                    }
                }
                Segment::Variable { name, raw } => {
                    if name.is_empty() {
                        return Err(TemplateError::EmptyVariableName(offset));
                    }
                    if !is_identifier(&name) {
                        return Err(TemplateError::InvalidVariableName {
                            position: offset,
                            name,
                        });
                    }
                    if !names.insert(name.clone()) {
                        return Err(TemplateError::DuplicateVariable(name));
                    }
                    offset += name.chars().count() + if raw { 6 } else { 4 };
                    out.push(Segment::Variable { name, raw });
                }
            }
        }
        Ok(Self { segments: out })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Variables in segment order, with their raw flag.
    pub fn variables(&self) -> Vec<(&str, bool)> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Variable { name, raw } => Some((name.as_str(), *raw)),
                Segment::Literal { .. } => None,
            })
            .collect()
    }

    /// Substitutes `values` into every variable. Extra values are ignored.
    pub fn render<V: AsRef<str>>(&self, values: &HashMap<String, V>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal { text } => out.push_str(text),
                Segment::Variable { name, .. } => {
                    let value = values
                        .get(name)
                        .ok_or_else(|| TemplateError::MissingValue(name.clone()))?;
                    out.push_str(value.as_ref());
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for CiceroTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for segment in &self.segments {
            match segment {
                Segment::Literal { text } => f.write_str(text)?,
                Segment::Variable { name, raw: false } => write!(f, "{{{{{name}}}}}")?,
                Segment::Variable { name, raw: true } => write!(f, "{{{{{{{name}}}}}}}")?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for CiceroTemplate {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_template(s)
    }
}

/// Parses Cicero template text. Positions in errors are character offsets.
pub fn parse_template(text: &str) -> Result<CiceroTemplate, TemplateError> {
    let chars: Vec<char> = text.chars().collect();
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;

    while i < chars.len() {
        match chars[i] {
            '}' => return Err(TemplateError::UnbalancedBraces(i)),
            '{' => {
                let open = i;
                let run = chars[i..].iter().take_while(|&&c| c == '{').count();
                match run {
                    1 => return Err(TemplateError::UnbalancedBraces(open)),
                    2 | 3 => {}
                    _ => return Err(TemplateError::NestedBraces(open + 3)),
                }
                i += run;
                let name_start = i;
                while i < chars.len() && chars[i] != '{' && chars[i] != '}' {
                    i += 1;
                }
                if i == chars.len() {
                    return Err(TemplateError::UnbalancedBraces(open));
                }
                if chars[i] == '{' {
                    return Err(TemplateError::NestedBraces(i));
                }
                let close = chars[i..].iter().take_while(|&&c| c == '}').count();
                if close < run {
                    return Err(TemplateError::UnbalancedBraces(i));
                }
                let name: String = chars[name_start..i].iter().collect();
                if name.is_empty() {
                    return Err(TemplateError::EmptyVariableName(open));
                }
                if !is_identifier(&name) {
                    return Err(TemplateError::InvalidVariableName {
                        position: name_start,
                        name,
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::variable(name, run == 3));
                // any surplus closing braces are reported on the next pass
                i += run;
            }
            c => {
                literal.push(c);
                i += 1;
            }
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::literal(literal));
    }
    CiceroTemplate::new(segments)
}

/// Turns the document into a template, replacing each mark's span by its
/// variable. Only accepted bindings are applied.
pub fn apply_marks(
    document: &SourceDocument,
    marks: &[VariableBinding],
) -> Result<CiceroTemplate, TemplateError> {
    let mut sorted: Vec<&VariableBinding> = marks.iter().filter(|m| m.accepted).collect();
    sorted.sort_by_key(|m| (m.span.start, m.span.end));

    for pair in sorted.windows(2) {
        let (a, b) = (&pair[0].span, &pair[1].span);
        if b.start < a.end {
            return Err(TemplateError::OverlappingMarks((a.start, a.end), (b.start, b.end)));
        }
    }

    let mut segments = Vec::with_capacity(sorted.len() * 2 + 1);
    let mut cursor = 0;
    for mark in sorted {
        let (start, end) = (mark.span.start, mark.span.end);
        if !document.is_token_aligned(start, end) {
            return Err(TemplateError::UnalignedMark(start, end));
        }
        let before = document.slice(cursor, start).unwrap_or_default();
        segments.push(Segment::literal(before));
        segments.push(Segment::variable(mark.variable_name.clone(), mark.raw));
        cursor = end;
    }
    segments.push(Segment::literal(
        document.slice(cursor, document.char_len()).unwrap_or_default(),
    ));
    CiceroTemplate::new(segments)
}
