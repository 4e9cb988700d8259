//! A subset of the Concerto modeling language and its JSON instances.
//!
//! Supported grammar:
//!
//! ```text
//! model       := declaration*
//! declaration := ("asset" | "participant" | "transaction" | "concept")
//!                Name ["extends" Name] "{" field* "}"
//! field       := ("o" | "-->") Type name ["optional"]
//! ```
//!
//! `//` and `/* */` comments are skipped. There are no namespaces, imports,
//! enums, decorators or arrays. `Contract` and `Party` are built-in,
//! field-less declarations that models may extend or reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::document::is_identifier;

/// Built-in declarations every model can refer to.
pub const BUILTIN_CLASSES: [&str; 2] = ["Contract", "Party"];
pub const PRIMITIVE_TYPES: [&str; 6] = [
    "String",
    "MonetaryAmount",
    "DateTime",
    "Integer",
    "Double",
    "Boolean",
];

/// Key carrying the class name in instance JSON.
pub const CLASS_KEY: &str = "$class";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("syntax error at {line}:{col}: {message}")]
    SyntaxError {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("unknown super type `{0}`")]
    UnknownSuperType(String),
    #[error("duplicate declaration `{0}`")]
    DuplicateDeclaration(String),
    #[error("cyclic inheritance: {}", .0.join(" -> "))]
    CyclicInheritance(Vec<String>),
    #[error("duplicate field `{field}` in `{class}`")]
    DuplicateField { class: String, field: String },
    #[error("unknown type `{type_name}` for field `{class}.{field}`")]
    UnknownType {
        class: String,
        field: String,
        type_name: String,
    },
    #[error("relationship `{class}.{field}` must target a declaration, not `{type_name}`")]
    InvalidRelationship {
        class: String,
        field: String,
        type_name: String,
    },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclarationKind {
    Asset,
    Participant,
    Transaction,
    Concept,
}

impl DeclarationKind {
    fn keyword(self) -> &'static str {
        match self {
            DeclarationKind::Asset => "asset",
            DeclarationKind::Participant => "participant",
            DeclarationKind::Transaction => "transaction",
            DeclarationKind::Concept => "concept",
        }
    }

    fn from_keyword(word: &str) -> Option<Self> {
        Some(match word {
            "asset" => DeclarationKind::Asset,
            "participant" => DeclarationKind::Participant,
            "transaction" => DeclarationKind::Transaction,
            "concept" => DeclarationKind::Concept,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// `o Type name`
    Property,
    /// `--> Type name`
    Relationship,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldDecl {
    pub kind: FieldKind,
    pub type_name: String,
    pub name: String,
    #[serde(default)]
    pub optional: bool,
}

impl FieldDecl {
    pub fn property(type_name: &str, name: &str) -> Self {
        Self {
            kind: FieldKind::Property,
            type_name: type_name.into(),
            name: name.into(),
            optional: false,
        }
    }

    pub fn relationship(type_name: &str, name: &str) -> Self {
        Self {
            kind: FieldKind::Relationship,
            type_name: type_name.into(),
            name: name.into(),
            optional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declaration {
    pub kind: DeclarationKind,
    pub name: String,
    #[serde(default, rename = "super")]
    pub super_type: Option<String>,
    pub fields: Vec<FieldDecl>,
}

/// A validated set of declarations in source order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Declaration>", into = "Vec<Declaration>")]
pub struct ConcertoModel {
    declarations: Vec<Declaration>,
}

impl TryFrom<Vec<Declaration>> for ConcertoModel {
    type Error = ModelError;

    fn try_from(decls: Vec<Declaration>) -> Result<Self, Self::Error> {
        ConcertoModel::new(decls)
    }
}

impl From<ConcertoModel> for Vec<Declaration> {
    fn from(m: ConcertoModel) -> Self {
        m.declarations
    }
}

pub fn is_primitive(type_name: &str) -> bool {
    PRIMITIVE_TYPES.contains(&type_name)
}

impl ConcertoModel {
    pub fn new(declarations: Vec<Declaration>) -> Result<Self, ModelError> {
        let mut names = BTreeSet::new();
        for decl in &declarations {
            if BUILTIN_CLASSES.contains(&decl.name.as_str())
                || is_primitive(&decl.name)
                || !names.insert(decl.name.as_str())
            {
                return Err(ModelError::DuplicateDeclaration(decl.name.clone()));
            }
        }
        let model = Self { declarations };

        for decl in &model.declarations {
            if let Some(sup) = &decl.super_type {
                if !model.is_class(sup) {
                    return Err(ModelError::UnknownSuperType(sup.clone()));
                }
            }
        }
        for decl in &model.declarations {
            let mut path = vec![decl.name.clone()];
            let mut current = decl;
            while let Some(sup) = &current.super_type {
                path.push(sup.clone());
                if sup == &decl.name {
                    return Err(ModelError::CyclicInheritance(path));
                }
                match model.declaration(sup) {
                    Some(next) => current = next,
                    None => break,
                }
                if path.len() > model.declarations.len() + 1 {
                    // a cycle that does not pass through `decl`; it is reported
                    // when the loop reaches one of its members
                    break;
                }
            }
        }
        for decl in &model.declarations {
            for field in &decl.fields {
                let known = is_primitive(&field.type_name) || model.is_class(&field.type_name);
                if !known {
                    return Err(ModelError::UnknownType {
                        class: decl.name.clone(),
                        field: field.name.clone(),
                        type_name: field.type_name.clone(),
                    });
                }
                if field.kind == FieldKind::Relationship && is_primitive(&field.type_name) {
                    return Err(ModelError::InvalidRelationship {
                        class: decl.name.clone(),
                        field: field.name.clone(),
                        type_name: field.type_name.clone(),
                    });
                }
            }
            let mut seen = BTreeSet::new();
            for field in model.effective_fields(&decl.name)? {
                if !seen.insert(field.name.clone()) {
                    return Err(ModelError::DuplicateField {
                        class: decl.name.clone(),
                        field: field.name,
                    });
                }
            }
        }
        Ok(model)
    }

    pub fn declarations(&self) -> &[Declaration] {
        &self.declarations
    }

    pub fn declaration(&self, name: &str) -> Option<&Declaration> {
        self.declarations.iter().find(|d| d.name == name)
    }

    /// True for declared classes and the built-ins.
    pub fn is_class(&self, name: &str) -> bool {
        BUILTIN_CLASSES.contains(&name) || self.declaration(name).is_some()
    }

    /// True for any type a field or binding may name.
    pub fn resolves_type(&self, name: &str) -> bool {
        is_primitive(name) || self.is_class(name)
    }

    /// Whether `class` is `ancestor` or inherits from it.
    pub fn is_subclass_of(&self, class: &str, ancestor: &str) -> bool {
        let mut current = Some(class.to_string());
        let mut steps = 0;
        while let Some(name) = current {
            if name == ancestor {
                return true;
            }
            steps += 1;
            if steps > self.declarations.len() + 1 {
                return false;
            }
            current = self.declaration(&name).and_then(|d| d.super_type.clone());
        }
        false
    }

    /// Inherited fields first (root ancestor down), then the class's own.
    pub fn effective_fields(&self, class_name: &str) -> Result<Vec<FieldDecl>, ModelError> {
        if BUILTIN_CLASSES.contains(&class_name) {
            return Ok(Vec::new());
        }
        let mut chain = Vec::new();
        let mut current = self
            .declaration(class_name)
            .ok_or_else(|| ModelError::UnknownClass(class_name.to_string()))?;
        loop {
            chain.push(current);
            if chain.len() > self.declarations.len() {
                return Err(ModelError::CyclicInheritance(
                    chain.iter().map(|d| d.name.clone()).collect(),
                ));
            }
            match current.super_type.as_deref().and_then(|s| self.declaration(s)) {
                Some(next) => current = next,
                None => break,
            }
        }
        Ok(chain
            .iter()
            .rev()
            .flat_map(|d| d.fields.iter().cloned())
            .collect())
    }

    /// The class a contract's data is extracted into: the first declaration
    /// deriving from `Contract`, else the first asset, else the first one.
    pub fn contract_class(&self) -> Option<&str> {
        self.declarations
            .iter()
            .find(|d| d.super_type.is_some() && self.is_subclass_of(&d.name, "Contract"))
            .or_else(|| {
                self.declarations
                    .iter()
                    .find(|d| d.kind == DeclarationKind::Asset)
            })
            .or_else(|| self.declarations.first())
            .map(|d| d.name.as_str())
    }
}

impl fmt::Display for ConcertoModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, decl) in self.declarations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{} {}", decl.kind.keyword(), decl.name)?;
            if let Some(sup) = &decl.super_type {
                write!(f, " extends {sup}")?;
            }
            writeln!(f, " {{")?;
            for field in &decl.fields {
                let marker = match field.kind {
                    FieldKind::Property => "o",
                    FieldKind::Relationship => "-->",
                };
                write!(f, "  {marker} {} {}", field.type_name, field.name)?;
                if field.optional {
                    write!(f, " optional")?;
                }
                writeln!(f)?;
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Word(String),
    Open,
    Close,
    Arrow,
}

struct Lexed {
    lexeme: Lexeme,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> ModelError {
    ModelError::SyntaxError {
        line,
        col,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Lexed>, ModelError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;

    let advance = |i: &mut usize, line: &mut usize, col: &mut usize, n: usize| {
        for _ in 0..n {
            if chars[*i] == '\n' {
                *line += 1;
                *col = 1;
            } else {
                *col += 1;
            }
            *i += 1;
        }
    };

    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col, 1);
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                advance(&mut i, &mut line, &mut col, 1);
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            let (l0, c0) = (line, col);
            advance(&mut i, &mut line, &mut col, 2);
            loop {
                if i + 1 >= chars.len() {
                    return Err(syntax(l0, c0, "unterminated comment"));
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    advance(&mut i, &mut line, &mut col, 2);
                    break;
                }
                advance(&mut i, &mut line, &mut col, 1);
            }
        } else if c == '{' || c == '}' {
            let lexeme = if c == '{' { Lexeme::Open } else { Lexeme::Close };
            out.push(Lexed { lexeme, line, col });
            advance(&mut i, &mut line, &mut col, 1);
        } else if c == '-' {
            if chars.get(i + 1) == Some(&'-') && chars.get(i + 2) == Some(&'>') {
                out.push(Lexed {
                    lexeme: Lexeme::Arrow,
                    line,
                    col,
                });
                advance(&mut i, &mut line, &mut col, 3);
            } else {
                return Err(syntax(line, col, "expected `-->`"));
            }
        } else if c.is_ascii_alphanumeric() || c == '_' {
            let (l0, c0) = (line, col);
            let mut word = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                word.push(chars[i]);
                advance(&mut i, &mut line, &mut col, 1);
            }
            out.push(Lexed {
                lexeme: Lexeme::Word(word),
                line: l0,
                col: c0,
            });
        } else {
            return Err(syntax(line, col, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    lexemes: Vec<Lexed>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Lexed> {
        self.lexemes.get(self.pos)
    }

    fn here(&self) -> (usize, usize) {
        self.peek().map(|l| (l.line, l.col)).unwrap_or(self.eof)
    }

    fn next(&mut self) -> Option<&Lexed> {
        let l = self.lexemes.get(self.pos);
        self.pos += 1;
        l
    }

    fn identifier(&mut self, what: &str) -> Result<String, ModelError> {
        let (line, col) = self.here();
        match self.next().map(|l| &l.lexeme) {
            Some(Lexeme::Word(w)) if is_identifier(w) => Ok(w.clone()),
            _ => Err(syntax(line, col, format!("expected {what}"))),
        }
    }

    fn expect(&mut self, lexeme: Lexeme, what: &str) -> Result<(), ModelError> {
        let (line, col) = self.here();
        match self.next() {
            Some(l) if l.lexeme == lexeme => Ok(()),
            _ => Err(syntax(line, col, format!("expected {what}"))),
        }
    }

    fn declaration(&mut self) -> Result<Declaration, ModelError> {
        let (line, col) = self.here();
        let kind = match self.next().map(|l| &l.lexeme) {
            Some(Lexeme::Word(w)) => DeclarationKind::from_keyword(w),
            _ => None,
        }
        .ok_or_else(|| syntax(line, col, "expected asset, participant, transaction or concept"))?;
        let name = self.identifier("declaration name")?;
        let mut super_type = None;
        if matches!(self.peek().map(|l| &l.lexeme), Some(Lexeme::Word(w)) if w == "extends") {
            self.pos += 1;
            super_type = Some(self.identifier("super type name")?);
        }
        self.expect(Lexeme::Open, "`{`")?;
        let mut fields = Vec::new();
        loop {
            let (line, col) = self.here();
            let kind = match self.next().map(|l| &l.lexeme) {
                Some(Lexeme::Close) => break,
                Some(Lexeme::Arrow) => FieldKind::Relationship,
                Some(Lexeme::Word(w)) if w == "o" => FieldKind::Property,
                _ => return Err(syntax(line, col, "expected `o`, `-->` or `}`")),
            };
            let type_name = self.identifier("field type")?;
            let name = self.identifier("field name")?;
            let mut optional = false;
            if matches!(self.peek().map(|l| &l.lexeme), Some(Lexeme::Word(w)) if w == "optional") {
                self.pos += 1;
                optional = true;
            }
            fields.push(FieldDecl {
                kind,
                type_name,
                name,
                optional,
            });
        }
        Ok(Declaration {
            kind,
            name,
            super_type,
            fields,
        })
    }
}

/// Parses model text into a validated [`ConcertoModel`].
pub fn parse_model(text: &str) -> Result<ConcertoModel, ModelError> {
    let lexemes = lex(text)?;
    let last_line = text.lines().count().max(1);
    let last_col = text.lines().last().map(|l| l.chars().count() + 1).unwrap_or(1);
    let mut parser = Parser {
        lexemes,
        pos: 0,
        eof: (last_line, last_col),
    };
    let mut declarations = Vec::new();
    while parser.peek().is_some() {
        declarations.push(parser.declaration()?);
    }
    ConcertoModel::new(declarations)
}

impl std::str::FromStr for ConcertoModel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_model(s)
    }
}

/// A field value in a [`DataInstance`].
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    String(String),
    Number(serde_json::Number),
    Boolean(bool),
    Instance(DataInstance),
    /// A relationship target, serialized as a plain string.
    Reference(String),
}

impl Value {
    fn to_json(&self) -> serde_json::Value {
        match self {
            Value::String(s) | Value::Reference(s) => serde_json::Value::String(s.clone()),
            Value::Number(n) => serde_json::Value::Number(n.clone()),
            Value::Boolean(b) => serde_json::Value::Bool(*b),
            Value::Instance(i) => i.to_json_value(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Value::String(_) => "string",
            Value::Number(_) => "number",
            Value::Boolean(_) => "boolean",
            Value::Instance(_) => "instance",
            Value::Reference(_) => "reference",
        }
    }

    /// The text of string-like values.
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::String(s) | Value::Reference(s) => Some(s),
            _ => None,
        }
    }

    /// Human-readable form used when rendering into a template.
    pub fn display_text(&self) -> String {
        match self {
            Value::String(s) | Value::Reference(s) => s.clone(),
            other => other.to_json().to_string(),
        }
    }
}

/// A class name plus a map of field values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataInstance {
    pub class_name: String,
    pub values: BTreeMap<String, Value>,
}

impl DataInstance {
    pub fn new(class_name: impl Into<String>) -> Self {
        Self {
            class_name: class_name.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: Value) -> Self {
        self.values.insert(field.to_string(), value);
        self
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert(CLASS_KEY.into(), serde_json::Value::String(self.class_name.clone()));
        for (k, v) in &self.values {
            map.insert(k.clone(), v.to_json());
        }
        serde_json::Value::Object(map)
    }

    /// Converts a JSON object without a model: strings stay strings and
    /// nested objects must carry `$class`.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, InstanceError> {
        convert_object(None, value, None)
    }
}

impl Serialize for DataInstance {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DataInstance {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        DataInstance::from_json_value(&value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingField { field: String },
    UnknownField { field: String },
    TypeMismatch {
        field: String,
        expected: String,
        found: String,
    },
    UnknownClass { class: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationWarning {
    pub field: String,
    pub message: String,
}

/// Violations make an instance invalid; warnings do not.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ValidationWarning>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| match v {
                Violation::MissingField { field } => format!("missing field `{field}`"),
                Violation::UnknownField { field } => format!("unknown field `{field}`"),
                Violation::TypeMismatch {
                    field,
                    expected,
                    found,
                } => format!("`{field}` expected {expected}, found {found}"),
                Violation::UnknownClass { class } => format!("unknown class `{class}`"),
            })
            .collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstanceError {
    #[error("invalid JSON: {0}")]
    JsonSyntaxError(String),
    #[error("expected a JSON object at `{0}`")]
    NotAnObject(String),
    #[error("missing `$class` at `{0}`")]
    MissingClass(String),
    #[error("unsupported JSON value at `{0}`")]
    UnsupportedValue(String),
    #[error("instance does not match the model: {0}")]
    Invalid(ValidationReport),
}

fn monetary_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^-?[0-9]+(\.[0-9]+)? [A-Z]{3}$").unwrap())
}

fn is_datetime(text: &str) -> bool {
    chrono::DateTime::parse_from_rfc3339(text).is_ok()
        || chrono::NaiveDate::parse_from_str(text, "%Y-%m-%d").is_ok()
}

fn join_path(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// Checks an instance against the model. Never fails: problems are data.
pub fn validate_instance(model: &ConcertoModel, instance: &DataInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_into(model, instance, "", &mut report);
    report
}

fn validate_into(
    model: &ConcertoModel,
    instance: &DataInstance,
    prefix: &str,
    report: &mut ValidationReport,
) {
    let fields = match model.effective_fields(&instance.class_name) {
        Ok(fields) => fields,
        Err(_) => {
            report.violations.push(Violation::UnknownClass {
                class: instance.class_name.clone(),
            });
            return;
        }
    };
    let declared: BTreeMap<&str, &FieldDecl> = fields.iter().map(|f| (f.name.as_str(), f)).collect();

    for field in &fields {
        let path = join_path(prefix, &field.name);
        match instance.values.get(&field.name) {
            None if !field.optional => report.violations.push(Violation::MissingField { field: path }),
            None => {}
            Some(value) => check_value(model, field, value, &path, report),
        }
    }
    for key in instance.values.keys() {
        if !declared.contains_key(key.as_str()) {
            report.violations.push(Violation::UnknownField {
                field: join_path(prefix, key),
            });
        }
    }
}

fn check_value(
    model: &ConcertoModel,
    field: &FieldDecl,
    value: &Value,
    path: &str,
    report: &mut ValidationReport,
) {
    let mismatch = |report: &mut ValidationReport, expected: &str| {
        report.violations.push(Violation::TypeMismatch {
            field: path.to_string(),
            expected: expected.to_string(),
            found: value.kind_name().to_string(),
        });
    };
    let ty = field.type_name.as_str();

    if field.kind == FieldKind::Relationship {
        if value.as_text().is_none() {
            mismatch(report, &format!("reference to {ty}"));
        }
        return;
    }
    match ty {
        "String" => {
            if value.as_text().is_none() {
                mismatch(report, ty);
            }
        }
        "MonetaryAmount" | "DateTime" => match value.as_text() {
            None => mismatch(report, ty),
            Some(text) => {
                let ok = if ty == "MonetaryAmount" {
                    monetary_re().is_match(text)
                } else {
                    is_datetime(text)
                };
                if !ok {
                    report.warnings.push(ValidationWarning {
                        field: path.to_string(),
                        message: format!("`{text}` is not in canonical {ty} form"),
                    });
                }
            }
        },
        "Integer" => match value {
            Value::Number(n) if n.is_i64() || n.is_u64() => {}
            _ => mismatch(report, ty),
        },
        "Double" => {
            if !matches!(value, Value::Number(_)) {
                mismatch(report, ty);
            }
        }
        "Boolean" => {
            if !matches!(value, Value::Boolean(_)) {
                mismatch(report, ty);
            }
        }
        class => match value {
            Value::Instance(nested) if model.is_subclass_of(&nested.class_name, class) => {
                validate_into(model, nested, path, report);
            }
            _ => mismatch(report, class),
        },
    }
}

/// Canonical JSON: sorted keys, no insignificant whitespace.
pub fn instance_to_json(instance: &DataInstance) -> String {
    // serde_json's default map is ordered by key
    instance.to_json_value().to_string()
}

/// Parses instance JSON, typing values by the model, then validates it.
pub fn instance_from_json(model: &ConcertoModel, text: &str) -> Result<DataInstance, InstanceError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| InstanceError::JsonSyntaxError(e.to_string()))?;
    let instance = convert_object(Some(model), &value, None)?;
    let report = validate_instance(model, &instance);
    if report.is_valid() {
        Ok(instance)
    } else {
        Err(InstanceError::Invalid(report))
    }
}

fn convert_object(
    model: Option<&ConcertoModel>,
    value: &serde_json::Value,
    path: Option<&str>,
) -> Result<DataInstance, InstanceError> {
    let here = path.unwrap_or("").to_string();
    let map = value
        .as_object()
        .ok_or_else(|| InstanceError::NotAnObject(here.clone()))?;
    let class_name = map
        .get(CLASS_KEY)
        .and_then(|v| v.as_str())
        .ok_or_else(|| InstanceError::MissingClass(here.clone()))?
        .to_string();
    let fields: BTreeMap<String, FieldDecl> = model
        .and_then(|m| m.effective_fields(&class_name).ok())
        .unwrap_or_default()
        .into_iter()
        .map(|f| (f.name.clone(), f))
        .collect();

    let mut values = BTreeMap::new();
    for (key, raw) in map {
        if key == CLASS_KEY {
            continue;
        }
        let field_path = join_path(&here, key);
        let is_relationship = fields
            .get(key)
            .is_some_and(|f| f.kind == FieldKind::Relationship);
        let converted = match raw {
            serde_json::Value::String(s) if is_relationship => Value::Reference(s.clone()),
            serde_json::Value::String(s) => Value::String(s.clone()),
            serde_json::Value::Number(n) => Value::Number(n.clone()),
            serde_json::Value::Bool(b) => Value::Boolean(*b),
            serde_json::Value::Object(_) => {
                Value::Instance(convert_object(model, raw, Some(&field_path))?)
            }
            serde_json::Value::Null | serde_json::Value::Array(_) => {
                return Err(InstanceError::UnsupportedValue(field_path))
            }
        };
        values.insert(key.clone(), converted);
    }
    Ok(DataInstance { class_name, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PAYMENT_MODEL: &str = "asset PaymentUponDeliveryContract extends Contract {
  --> Party buyer
  --> Party seller
  o MonetaryAmount costOfGoods
  o MonetaryAmount deliveryFee
}";

    const DELIVERY_MODEL: &str = "asset AcceptanceOfDelivery extends Contract {
  --> Party shipper
  --> Party receiver
  o String deliverable
}";

    #[test]
    fn parses_payment_model() {
        let model = parse_model(PAYMENT_MODEL).unwrap();
        assert_eq!(model.declarations().len(), 1);
        let decl = &model.declarations()[0];
        assert_eq!(decl.kind, DeclarationKind::Asset);
        assert_eq!(decl.super_type.as_deref(), Some("Contract"));
        assert_eq!(
            decl.fields,
            [
                FieldDecl::relationship("Party", "buyer"),
                FieldDecl::relationship("Party", "seller"),
                FieldDecl::property("MonetaryAmount", "costOfGoods"),
                FieldDecl::property("MonetaryAmount", "deliveryFee"),
            ]
        );
        assert_eq!(model.effective_fields("PaymentUponDeliveryContract").unwrap().len(), 4);
        assert_eq!(model.contract_class(), Some("PaymentUponDeliveryContract"));
    }

    #[test]
    fn empty_model() {
        assert!(parse_model("").unwrap().declarations().is_empty());
        assert!(parse_model("  // nothing\n/* here */").unwrap().declarations().is_empty());
    }

    #[test]
    fn model_errors() {
        assert_eq!(
            parse_model("asset A extends B {}"),
            Err(ModelError::UnknownSuperType("B".into()))
        );
        assert_eq!(
            parse_model("asset A {} concept A {}"),
            Err(ModelError::DuplicateDeclaration("A".into()))
        );
        assert_eq!(
            parse_model("participant Party {}"),
            Err(ModelError::DuplicateDeclaration("Party".into()))
        );
        assert_eq!(
            parse_model("asset A extends B {} asset B extends A {}"),
            Err(ModelError::CyclicInheritance(vec!["A".into(), "B".into(), "A".into()]))
        );
        assert_eq!(
            parse_model("asset A extends A {}"),
            Err(ModelError::CyclicInheritance(vec!["A".into(), "A".into()]))
        );
        assert!(matches!(
            parse_model("asset B { o String x } asset A extends B { o Integer x }"),
            Err(ModelError::DuplicateField { .. })
        ));
        assert!(matches!(
            parse_model("asset A { o Address home }"),
            Err(ModelError::UnknownType { .. })
        ));
        assert!(matches!(
            parse_model("asset A { --> String x }"),
            Err(ModelError::InvalidRelationship { .. })
        ));
    }

    #[test]
    fn syntax_error_positions() {
        assert_eq!(
            parse_model("asset A {\n  o String\n}"),
            Err(ModelError::SyntaxError {
                line: 3,
                col: 1,
                message: "expected field name".into()
            })
        );
        assert!(matches!(
            parse_model("enum Colour {}"),
            Err(ModelError::SyntaxError { line: 1, col: 1, .. })
        ));
        assert!(matches!(
            parse_model("asset A { o String x"),
            Err(ModelError::SyntaxError { .. })
        ));
        assert!(matches!(
            parse_model("asset A { -> Party p }"),
            Err(ModelError::SyntaxError { line: 1, col: 11, .. })
        ));
    }

    #[test]
    fn optional_fields_and_printing() {
        let text = "concept Address {\n  o String street optional\n}\n\nparticipant Buyer extends Party {\n  o Address home\n}\n";
        let model = parse_model(text).unwrap();
        assert!(model.declarations()[0].fields[0].optional);
        assert_eq!(model.to_string(), text);
        assert_eq!(parse_model(&model.to_string()).unwrap(), model);
    }

    #[test]
    fn effective_field_order() {
        let model = parse_model("concept B { o String x } concept A extends B { o String y } concept E {}").unwrap();
        let names: Vec<_> = model
            .effective_fields("A")
            .unwrap()
            .into_iter()
            .map(|f| f.name)
            .collect();
        assert_eq!(names, ["x", "y"]);
        assert!(model.effective_fields("E").unwrap().is_empty());
        assert_eq!(model.effective_fields("Z"), Err(ModelError::UnknownClass("Z".into())));
    }

    fn text(s: &str) -> Value {
        Value::String(s.to_string())
    }

    #[test]
    fn validates_payment_instance() {
        let model = parse_model(PAYMENT_MODEL).unwrap();
        let full = DataInstance::new("PaymentUponDeliveryContract")
            .with("buyer", text("Dan"))
            .with("seller", text("Jerome"))
            .with("costOfGoods", text("200.00 USD"))
            .with("deliveryFee", text("20.00 USD"));
        let report = validate_instance(&model, &full);
        assert!(report.is_valid());
        assert!(report.warnings.is_empty());

        let mut missing = full.clone();
        missing.values.remove("deliveryFee");
        assert_eq!(
            validate_instance(&model, &missing).violations,
            [Violation::MissingField {
                field: "deliveryFee".into()
            }]
        );

        let extra = full.clone().with("colour", text("red"));
        assert_eq!(
            validate_instance(&model, &extra).violations,
            [Violation::UnknownField {
                field: "colour".into()
            }]
        );

        let loose = full.clone().with("costOfGoods", text("two hundred dollars"));
        let report = validate_instance(&model, &loose);
        assert!(report.is_valid());
        assert_eq!(report.warnings.len(), 1);

        let wrong = full.with("buyer", Value::Boolean(true));
        assert!(matches!(
            validate_instance(&model, &wrong).violations[..],
            [Violation::TypeMismatch { .. }]
        ));

        assert_eq!(
            validate_instance(&model, &DataInstance::new("Nope")).violations,
            [Violation::UnknownClass { class: "Nope".into() }]
        );
    }

    #[test]
    fn validates_nested_and_primitives() {
        let model = parse_model(
            "concept Address { o String city }\nasset Lease { o Address site o Integer months o Double rate o Boolean renewable o DateTime start }",
        )
        .unwrap();
        let good = DataInstance::new("Lease")
            .with("site", Value::Instance(DataInstance::new("Address").with("city", text("Paris"))))
            .with("months", Value::Number(12.into()))
            .with("rate", Value::Number(serde_json::Number::from_f64(1.5).unwrap()))
            .with("renewable", Value::Boolean(false))
            .with("start", text("2024-01-31"));
        assert_eq!(validate_instance(&model, &good), ValidationReport::default());

        let bad = good
            .clone()
            .with("site", Value::Instance(DataInstance::new("Address")))
            .with("months", Value::Number(serde_json::Number::from_f64(1.5).unwrap()));
        let report = validate_instance(&model, &bad);
        assert!(report.violations.contains(&Violation::MissingField {
            field: "site.city".into()
        }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TypeMismatch { field, .. } if field == "months")));
    }

    #[test]
    fn json_round_trip() {
        let model = parse_model(DELIVERY_MODEL).unwrap();
        let json = r#"{"$class":"AcceptanceOfDelivery","deliverable":"Widgets","receiver":"Alice","shipper":"Bob"}"#;
        let instance = instance_from_json(&model, json).unwrap();
        assert_eq!(instance.values["shipper"], Value::Reference("Bob".into()));
        assert_eq!(instance.values["deliverable"], text("Widgets"));
        assert_eq!(instance_to_json(&instance), json);

        let reordered = r#"{ "shipper": "Bob", "receiver": "Alice", "deliverable": "Widgets", "$class": "AcceptanceOfDelivery" }"#;
        assert_eq!(instance_to_json(&instance_from_json(&model, reordered).unwrap()), json);
    }

    #[test]
    fn json_edge_cases() {
        let model = parse_model("concept X {}").unwrap();
        assert_eq!(instance_to_json(&DataInstance::new("X")), r#"{"$class":"X"}"#);
        assert!(matches!(
            instance_from_json(&model, "{"),
            Err(InstanceError::JsonSyntaxError(_))
        ));
        assert!(matches!(
            instance_from_json(&model, "[]"),
            Err(InstanceError::NotAnObject(_))
        ));
        assert!(matches!(
            instance_from_json(&model, "{}"),
            Err(InstanceError::MissingClass(_))
        ));
        assert!(matches!(
            instance_from_json(&model, r#"{"$class":"X","y":1}"#),
            Err(InstanceError::Invalid(_))
        ));
    }
}
