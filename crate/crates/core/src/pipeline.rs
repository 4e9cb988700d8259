//! The conversion job and its forward-only state machine.
//!
//! ```text
//! Created -> TemplateSelected -> Marked -> Extracted -> Emitted
//! ```
//!
//! Every operation checks the job's status first and works on a copy, so a
//! failed call never leaves a job half-updated. Successful operations are
//! appended to the job's history, which travels with the output as
//! provenance and is enough to replay the conversion exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::cicero::{apply_marks, parse_template, TemplateError};
use crate::concerto::{
    instance_to_json, parse_model, validate_instance, ConcertoModel, DataInstance, FieldDecl,
    ModelError, ValidationReport, ValidationWarning, Value,
};
use crate::document::{is_identifier, EntityLabel, LabeledSpan, SourceDocument, VariableBinding};
use crate::qa::{coerce_value, fill_instance, normalize_answer, ChunkConfig, FillResult, QaError, SpanExtractor};
use crate::retrieval::{IndexError, TemplateIndex, TemplateRecord};
use crate::tagger::{concerto_type_for, propose_marks, BaselineConfig, Tagger, TaggerError, Threshold};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("cannot {operation} a job in status {status}")]
    InvalidState { operation: &'static str, status: JobStatus },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template model has no declaration to extract into")]
    NoContractClass,
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown mark `{0}`")]
    UnknownMark(String),
    #[error("type `{0}` does not resolve in the job's model")]
    UnknownType(String),
    #[error("instance failed validation: {0}")]
    ValidationFailed(ValidationReport),
    #[error("a template named `{0}` already exists")]
    DuplicateName(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error("storage error: {0}")]
    Io(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Created,
    TemplateSelected,
    Marked,
    Extracted,
    Emitted,
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobStatus::Created => "created",
            JobStatus::TemplateSelected => "template_selected",
            JobStatus::Marked => "marked",
            JobStatus::Extracted => "extracted",
            JobStatus::Emitted => "emitted",
        })
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// A user correction to the mark set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MarkEdit {
    Add {
        start: usize,
        end: usize,
        label: EntityLabel,
        name: String,
        #[serde(default)]
        concerto_type: Option<String>,
        #[serde(default)]
        raw: bool,
    },
    Remove {
        name: String,
    },
    Rename {
        from: String,
        to: String,
    },
    Retype {
        name: String,
        #[serde(default)]
        label: Option<EntityLabel>,
        #[serde(default)]
        concerto_type: Option<String>,
    },
    SetRaw {
        name: String,
        raw: bool,
    },
    Accept {
        name: String,
    },
    Reject {
        name: String,
    },
}

/// One successful job operation, as recorded in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JobEvent {
    SelectTemplate {
        template_id: String,
    },
    AutoMark {
        threshold: Threshold,
        tagger_versions: BTreeMap<EntityLabel, String>,
    },
    EditMarks {
        edits: Vec<MarkEdit>,
    },
    AutoExtract {
        extractor_id: String,
        chunking: ChunkConfig,
    },
    SetValue {
        field: String,
        value: serde_json::Value,
    },
    Emit {
        force: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub class_name: String,
    pub tagger_versions: BTreeMap<EntityLabel, String>,
    pub threshold: Option<Threshold>,
    pub extractor_id: Option<String>,
    pub created_at: DateTime<Utc>,
    pub emitted_at: DateTime<Utc>,
    pub history: Vec<JobEvent>,
}

/// The emitted artifacts: a Cicero template and the instance JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionOutput {
    pub cicero_text: String,
    pub instance_json: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ValidationWarning>,
}

/// A ranked template suggestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: String,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionJob {
    id: String,
    status: JobStatus,
    document: SourceDocument,
    created_at: DateTime<Utc>,
    template_id: Option<String>,
    model: Option<ConcertoModel>,
    class_name: Option<String>,
    /// Variables of the selected template, shown to the user as hints.
    template_variables: Vec<String>,
    marks: Vec<VariableBinding>,
    tagger_versions: BTreeMap<EntityLabel, String>,
    threshold: Option<Threshold>,
    extractor_id: Option<String>,
    instance: Option<DataInstance>,
    confidences: BTreeMap<String, f64>,
    missing_fields: Vec<String>,
    validation: Option<ValidationReport>,
    output: Option<ConversionOutput>,
    history: Vec<JobEvent>,
}

fn require(op: &'static str, status: JobStatus, allowed: &[JobStatus]) -> Result<()> {
    if allowed.contains(&status) {
        Ok(())
    } else {
        Err(PipelineError::InvalidState { operation: op, status })
    }
}

impl ConversionJob {
    /// Starts a job for uploaded contract text.
    pub fn create(text: &str, clock: &dyn Clock) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(PipelineError::EmptyDocument);
        }
        Ok(Self {
            id: uuid::Uuid::new_v4().to_string(),
            status: JobStatus::Created,
            document: SourceDocument::new(text),
            created_at: clock.now(),
            template_id: None,
            model: None,
            class_name: None,
            template_variables: Vec::new(),
            marks: Vec::new(),
            tagger_versions: BTreeMap::new(),
            threshold: None,
            extractor_id: None,
            instance: None,
            confidences: BTreeMap::new(),
            missing_fields: Vec::new(),
            validation: None,
            output: None,
            history: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> JobStatus {
        self.status
    }

    pub fn document(&self) -> &SourceDocument {
        &self.document
    }

    pub fn template_id(&self) -> Option<&str> {
        self.template_id.as_deref()
    }

    pub fn model(&self) -> Option<&ConcertoModel> {
        self.model.as_ref()
    }

    pub fn class_name(&self) -> Option<&str> {
        self.class_name.as_deref()
    }

    pub fn template_variables(&self) -> &[String] {
        &self.template_variables
    }

    pub fn marks(&self) -> &[VariableBinding] {
        &self.marks
    }

    pub fn tagger_versions(&self) -> &BTreeMap<EntityLabel, String> {
        &self.tagger_versions
    }

    pub fn instance(&self) -> Option<&DataInstance> {
        self.instance.as_ref()
    }

    pub fn confidences(&self) -> &BTreeMap<String, f64> {
        &self.confidences
    }

    pub fn missing_fields(&self) -> &[String] {
        &self.missing_fields
    }

    pub fn validation(&self) -> Option<&ValidationReport> {
        self.validation.as_ref()
    }

    pub fn output(&self) -> Option<&ConversionOutput> {
        self.output.as_ref()
    }

    pub fn history(&self) -> &[JobEvent] {
        &self.history
    }

    /// Ranks library templates against the document.
    pub fn suggest_templates(&self, index: &TemplateIndex, top_n: usize) -> Result<Vec<Suggestion>> {
        Ok(index
            .more_like_this(self.document.text(), top_n)?
            .into_iter()
            .map(|(record, score)| Suggestion {
                id: record.id.clone(),
                name: record.name.clone(),
                score,
            })
            .collect())
    }

    /// Attaches a library template and its parsed data model.
    pub fn select_template(&mut self, index: &TemplateIndex, template_id: &str) -> Result<()> {
        require(
            "select a template for",
            self.status,
            &[JobStatus::Created, JobStatus::TemplateSelected],
        )?;
        let record = index
            .get(template_id)
            .ok_or_else(|| PipelineError::UnknownTemplate(template_id.to_string()))?;
        let model = parse_model(&record.concerto_text)?;
        let template = parse_template(&record.cicero_text)?;
        let class_name = match record.metadata.get("class") {
            Some(class) if model.declaration(class).is_some() => class.clone(),
            Some(class) => return Err(ModelError::UnknownClass(class.clone()).into()),
            None => model
                .contract_class()
                .ok_or(PipelineError::NoContractClass)?
                .to_string(),
        };

        self.template_variables = template.variables().into_iter().map(|(n, _)| n.to_string()).collect();
        self.template_id = Some(record.id.clone());
        self.model = Some(model);
        self.class_name = Some(class_name);
        self.status = JobStatus::TemplateSelected;
        self.history.push(JobEvent::SelectTemplate {
            template_id: record.id.clone(),
        });
        Ok(())
    }

    fn clear_extraction(&mut self) {
        self.instance = None;
        self.confidences.clear();
        self.missing_fields.clear();
        self.validation = None;
        self.extractor_id = None;
    }

    /// Replaces the marks with tagger proposals and pins the tagger versions.
    /// Re-running on a marked job discards the previous marks.
    pub fn auto_mark(&mut self, tagger: &dyn Tagger, threshold: Threshold) -> Result<()> {
        require("mark", self.status, &[JobStatus::TemplateSelected, JobStatus::Marked])?;
        let proposal = propose_marks(&self.document, tagger, threshold)?;
        self.marks = proposal.bindings;
        self.tagger_versions = proposal.tagger_versions;
        self.threshold = Some(threshold);
        self.clear_extraction();
        self.status = JobStatus::Marked;
        self.history.push(JobEvent::AutoMark {
            threshold,
            tagger_versions: self.tagger_versions.clone(),
        });
        Ok(())
    }

    /// Applies user edits to the marks. All edits apply or none do.
    pub fn update_marks(&mut self, edits: &[MarkEdit]) -> Result<()> {
        require("edit marks of", self.status, &[JobStatus::TemplateSelected, JobStatus::Marked])?;
        let model = self.model.as_ref().expect("model is attached on template selection");
        let mut marks = self.marks.clone();
        for edit in edits {
            apply_edit(&self.document, model, &mut marks, edit)?;
        }
        validate_marks(&self.document, model, &marks)?;
        self.marks = marks;
        self.status = JobStatus::Marked;
        self.history.push(JobEvent::EditMarks { edits: edits.to_vec() });
        Ok(())
    }

    /// Fills the data instance with the extractor and links marks whose text
    /// equals an extracted value to that field.
    pub fn auto_extract(&mut self, extractor: &dyn SpanExtractor, chunking: ChunkConfig) -> Result<()> {
        require("extract from", self.status, &[JobStatus::Marked, JobStatus::Extracted])?;
        let model = self.model.as_ref().expect("model is attached on template selection");
        let class_name = self.class_name.as_deref().expect("class is chosen with the model");
        let result = fill_instance(model, class_name, &self.document, extractor, chunking)?;
        let fields = model.effective_fields(class_name)?;

        link_marks_to_fields(&self.document, &mut self.marks, &fields, &result);
        self.validation = Some(validate_instance(model, &result.instance));
        self.instance = Some(result.instance);
        self.confidences = result.confidences;
        self.missing_fields = result.missing;
        self.extractor_id = Some(extractor.id());
        self.status = JobStatus::Extracted;
        self.history.push(JobEvent::AutoExtract {
            extractor_id: extractor.id(),
            chunking,
        });
        Ok(())
    }

    /// Sets (or with `null`, clears) one field by hand. Manual values carry
    /// confidence 1.0.
    pub fn update_value(&mut self, field: &str, value: serde_json::Value) -> Result<()> {
        require("set values of", self.status, &[JobStatus::Marked, JobStatus::Extracted])?;
        let model = self.model.as_ref().expect("model is attached on template selection");
        let class_name = self.class_name.clone().expect("class is chosen with the model");
        let decl = model
            .effective_fields(&class_name)?
            .into_iter()
            .find(|f| f.name == field)
            .ok_or_else(|| PipelineError::UnknownField(field.to_string()))?;
        let converted = json_to_value(&decl, &value)?;

        let mut instance = self.instance.clone().unwrap_or_else(|| DataInstance::new(&class_name));
        match converted {
            Some(v) => {
                instance.values.insert(field.to_string(), v);
                self.confidences.insert(field.to_string(), 1.0);
                self.missing_fields.retain(|f| f != field);
            }
            None => {
                instance.values.remove(field);
                self.confidences.remove(field);
                if !self.missing_fields.iter().any(|f| f == field) {
                    self.missing_fields.push(field.to_string());
                }
            }
        }
        self.validation = Some(validate_instance(model, &instance));
        self.instance = Some(instance);
        self.status = JobStatus::Extracted;
        self.history.push(JobEvent::SetValue {
            field: field.to_string(),
            value,
        });
        Ok(())
    }

    /// Produces the Cicero template and instance JSON. An invalid instance
    /// is refused unless `force` is set, in which case the problems are
    /// carried as warnings.
    pub fn emit_output(&mut self, force: bool, clock: &dyn Clock) -> Result<ConversionOutput> {
        require("emit", self.status, &[JobStatus::Extracted])?;
        let model = self.model.as_ref().expect("model is attached on template selection");
        let instance = self.instance.as_ref().expect("extracted jobs hold an instance");
        let report = validate_instance(model, instance);
        if !report.is_valid() && !force {
            return Err(PipelineError::ValidationFailed(report));
        }
        for mark in self.marks.iter().filter(|m| m.accepted) {
            if !model.resolves_type(&mark.concerto_type) {
                return Err(PipelineError::UnknownType(mark.concerto_type.clone()));
            }
        }
        let template = apply_marks(&self.document, &self.marks)?;

        let mut warnings = report.warnings.clone();
        warnings.extend(report.violations.iter().map(|v| ValidationWarning {
            field: String::new(),
            message: format!("forced past violation: {}", ValidationReport {
                violations: vec![v.clone()],
                warnings: vec![],
            }),
        }));
        let mut history = self.history.clone();
        history.push(JobEvent::Emit { force });
        let output = ConversionOutput {
            cicero_text: template.to_string(),
            instance_json: instance_to_json(instance),
            provenance: Provenance {
                template_id: self.template_id.clone().expect("template is selected"),
                class_name: self.class_name.clone().expect("class is chosen with the model"),
                tagger_versions: self.tagger_versions.clone(),
                threshold: self.threshold,
                extractor_id: self.extractor_id.clone(),
                created_at: self.created_at,
                emitted_at: clock.now(),
                history: history.clone(),
            },
            warnings,
        };
        self.history = history;
        self.validation = Some(report);
        self.output = Some(output.clone());
        self.status = JobStatus::Emitted;
        Ok(output)
    }

    /// Mark values for rendering the emitted template: each accepted mark's
    /// instance value if the field exists, else its span text.
    pub fn mark_values(&self) -> HashMap<String, String> {
        self.marks
            .iter()
            .filter(|m| m.accepted)
            .map(|m| {
                let value = self
                    .instance
                    .as_ref()
                    .and_then(|i| i.values.get(&m.variable_name))
                    .map(Value::display_text)
                    .unwrap_or_else(|| {
                        self.document
                            .slice(m.span.start, m.span.end)
                            .unwrap_or_default()
                            .to_string()
                    });
                (m.variable_name.clone(), value)
            })
            .collect()
    }
}

fn json_to_value(decl: &FieldDecl, value: &serde_json::Value) -> Result<Option<Value>> {
    Ok(Some(match value {
        serde_json::Value::Null => return Ok(None),
        serde_json::Value::String(s) => coerce_value(s, &decl.type_name, decl.kind),
        serde_json::Value::Number(n) => Value::Number(n.clone()),
        serde_json::Value::Bool(b) => Value::Boolean(*b),
        serde_json::Value::Object(_) => Value::Instance(
            DataInstance::from_json_value(value)
                .map_err(|e| PipelineError::UnknownField(format!("{}: {e}", decl.name)))?,
        ),
        serde_json::Value::Array(_) => {
            return Err(PipelineError::UnknownField(format!("{}: arrays are not supported", decl.name)))
        }
    }))
}

fn find_mark<'a>(marks: &'a mut [VariableBinding], name: &str) -> Result<&'a mut VariableBinding> {
    marks
        .iter_mut()
        .find(|m| m.variable_name == name)
        .ok_or_else(|| PipelineError::UnknownMark(name.to_string()))
}

fn check_name(marks: &[VariableBinding], name: &str) -> Result<()> {
    if !is_identifier(name) {
        return Err(TemplateError::InvalidVariableName {
            position: 0,
            name: name.to_string(),
        }
        .into());
    }
    if marks.iter().any(|m| m.variable_name == name) {
        return Err(TemplateError::DuplicateVariable(name.to_string()).into());
    }
    Ok(())
}

fn apply_edit(
    document: &SourceDocument,
    model: &ConcertoModel,
    marks: &mut Vec<VariableBinding>,
    edit: &MarkEdit,
) -> Result<()> {
    let check_type = |ty: &str| {
        if model.resolves_type(ty) {
            Ok(())
        } else {
            Err(PipelineError::UnknownType(ty.to_string()))
        }
    };
    match edit {
        MarkEdit::Add {
            start,
            end,
            label,
            name,
            concerto_type,
            raw,
        } => {
            check_name(marks, name)?;
            if !document.is_token_aligned(*start, *end) {
                return Err(TemplateError::UnalignedMark(*start, *end).into());
            }
            let concerto_type = concerto_type
                .clone()
                .unwrap_or_else(|| concerto_type_for(label).to_string());
            check_type(&concerto_type)?;
            marks.push(VariableBinding {
                span: LabeledSpan {
                    start: *start,
                    end: *end,
                    label: label.clone(),
                    probability: 1.0,
                },
                variable_name: name.clone(),
                concerto_type,
                raw: *raw,
                accepted: true,
                occurrences: Vec::new(),
            });
            marks.sort_by(|a, b| (a.span.start, &a.span.label).cmp(&(b.span.start, &b.span.label)));
        }
        MarkEdit::Remove { name } => {
            let before = marks.len();
            marks.retain(|m| &m.variable_name != name);
            if marks.len() == before {
                return Err(PipelineError::UnknownMark(name.clone()));
            }
        }
        MarkEdit::Rename { from, to } => {
            find_mark(marks, from)?;
            if from != to {
                check_name(marks, to)?;
            }
            find_mark(marks, from)?.variable_name = to.clone();
        }
        MarkEdit::Retype {
            name,
            label,
            concerto_type,
        } => {
            if let Some(ty) = concerto_type {
                check_type(ty)?;
            }
            let mark = find_mark(marks, name)?;
            if let Some(label) = label {
                mark.span.label = label.clone();
                if concerto_type.is_none() {
                    mark.concerto_type = concerto_type_for(label).to_string();
                }
            }
            if let Some(ty) = concerto_type {
                mark.concerto_type = ty.clone();
            }
        }
        MarkEdit::SetRaw { name, raw } => find_mark(marks, name)?.raw = *raw,
        MarkEdit::Accept { name } => find_mark(marks, name)?.accepted = true,
        MarkEdit::Reject { name } => find_mark(marks, name)?.accepted = false,
    }
    Ok(())
}

/// Names unique over every candidate, types resolvable, and the accepted
/// marks form a valid template.
fn validate_marks(document: &SourceDocument, model: &ConcertoModel, marks: &[VariableBinding]) -> Result<()> {
    let mut names = std::collections::BTreeSet::new();
    for mark in marks {
        if !names.insert(mark.variable_name.as_str()) {
            return Err(TemplateError::DuplicateVariable(mark.variable_name.clone()).into());
        }
        if !model.resolves_type(&mark.concerto_type) {
            return Err(PipelineError::UnknownType(mark.concerto_type.clone()));
        }
    }
    apply_marks(document, marks)?;
    Ok(())
}

/// Renames an accepted, not-yet-linked mark to the field whose extracted
/// value equals the mark's text. Marks inside the answer span are preferred,
/// then the earliest.
fn link_marks_to_fields(
    document: &SourceDocument,
    marks: &mut [VariableBinding],
    fields: &[FieldDecl],
    result: &FillResult,
) {
    let is_field = |name: &str| fields.iter().any(|f| f.name == name);
    for field in fields {
        if marks.iter().any(|m| m.variable_name == field.name) {
            continue;
        }
        let Some(answer) = result.answers.get(&field.name) else {
            continue;
        };
        let value = normalize_answer(&answer.text);
        let candidate = marks
            .iter()
            .enumerate()
            .filter(|(_, m)| m.accepted && !is_field(&m.variable_name))
            .filter(|(_, m)| document.slice(m.span.start, m.span.end) == Some(value.as_str()))
            .min_by_key(|(_, m)| {
                let inside = m.span.start >= answer.span.start && m.span.end <= answer.span.end;
                (!inside, m.span.start)
            })
            .map(|(i, _)| i);
        if let Some(i) = candidate {
            marks[i].variable_name = field.name.clone();
            marks[i].concerto_type = field.type_name.clone();
        }
    }
}

/// Creates a job with a fixed creation time, for replays and tests.
pub fn create_job_at(text: &str, created_at: DateTime<Utc>) -> Result<ConversionJob> {
    ConversionJob::create(text, &FixedClock(created_at))
}

/// Re-executes a conversion from its provenance and returns the output.
///
/// The tagger and extractor must report the versions and id recorded in the
/// provenance.
pub fn replay(
    document_text: &str,
    provenance: &Provenance,
    index: &TemplateIndex,
    tagger: &dyn Tagger,
    extractor: &dyn SpanExtractor,
) -> Result<ConversionOutput> {
    let mut job = create_job_at(document_text, provenance.created_at)?;
    for event in &provenance.history {
        match event {
            JobEvent::SelectTemplate { template_id } => job.select_template(index, template_id)?,
            JobEvent::AutoMark {
                threshold,
                tagger_versions,
            } => {
                if &tagger.versions() != tagger_versions {
                    return Err(PipelineError::ReplayMismatch(format!(
                        "tagger versions {:?} differ from recorded {:?}",
                        tagger.versions(),
                        tagger_versions
                    )));
                }
                job.auto_mark(tagger, *threshold)?;
            }
            JobEvent::EditMarks { edits } => job.update_marks(edits)?,
            JobEvent::AutoExtract { extractor_id, chunking } => {
                if &extractor.id() != extractor_id {
                    return Err(PipelineError::ReplayMismatch(format!(
                        "extractor `{}` differs from recorded `{extractor_id}`",
                        extractor.id()
                    )));
                }
                job.auto_extract(extractor, *chunking)?;
            }
            JobEvent::SetValue { field, value } => job.update_value(field, value.clone())?,
            JobEvent::Emit { force } => {
                return job.emit_output(*force, &FixedClock(provenance.emitted_at));
            }
        }
    }
    Err(PipelineError::ReplayMismatch("history has no emit step".into()))
}

/// A contributed template plus the user's corrections, queued for
/// retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub template: TemplateRecord,
    pub corrected_marks: Vec<VariableBinding>,
    pub corrected_values: DataInstance,
}

/// Append-only queue of contributions, optionally persisted as JSON lines.
#[derive(Debug, Default)]
pub struct ContributionQueue {
    path: Option<PathBuf>,
    records: Vec<ContributionRecord>,
}

impl ContributionQueue {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a queue file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut records = Vec::new();
        if path.exists() {
            for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(line)
                    .map_err(|e| PipelineError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
                records.push(record);
            }
        }
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    pub fn push(&mut self, record: ContributionRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&record).expect("contribution serializes");
            let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ContributionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Lowercase, dash-separated id derived from a template name.
pub fn slugify(name: &str) -> String {
    let mut slug = String::new();
    for c in name.chars() {
        if c.is_alphanumeric() {
            slug.extend(c.to_lowercase());
        } else if !slug.ends_with('-') && !slug.is_empty() {
            slug.push('-');
        }
    }
    slug.trim_end_matches('-').to_string()
}

/// Adds an emitted job to the template library and queues its
/// corrections for retraining.
pub fn contribute(
    job: &ConversionJob,
    name: &str,
    index: &mut TemplateIndex,
    queue: &mut ContributionQueue,
) -> Result<ContributionRecord> {
    require("contribute", job.status, &[JobStatus::Emitted])?;
    let id = slugify(name);
    let taken = index.records().any(|r| r.name == name || r.id == id);
    if id.is_empty() || taken {
        return Err(PipelineError::DuplicateName(name.to_string()));
    }
    let output = job.output.as_ref().expect("emitted jobs hold their output");
    let model = job.model.as_ref().expect("model is attached on template selection");
    let mut metadata = BTreeMap::new();
    metadata.insert("class".to_string(), output.provenance.class_name.clone());
    metadata.insert("source_job".to_string(), job.id.clone());
    let template = TemplateRecord {
        id,
        name: name.to_string(),
        sample_text: job.document.text().to_string(),
        cicero_text: output.cicero_text.clone(),
        concerto_text: model.to_string(),
        metadata,
    };
    index.index_template(template.clone())?;
    let record = ContributionRecord {
        template,
        corrected_marks: job.marks.iter().filter(|m| m.accepted).cloned().collect(),
        corrected_values: job.instance.clone().expect("emitted jobs hold an instance"),
    };
    if let Err(e) = queue.push(record.clone()) {
        index.remove_template(&record.template.id)?;
        return Err(e);
    }
    Ok(record)
}

/// Consumes the contribution queue to produce updated models.
pub trait RetrainHook {
    fn retrain(&self, queue: &[ContributionRecord]) -> Result<(), BackendError>;
}

/// Baseline retraining: every accepted mark's text joins its label's
/// gazetteer.
pub fn retrain_baseline(base: &BaselineConfig, queue: &[ContributionRecord]) -> BaselineConfig {
    let mut config = base.clone();
    for record in queue {
        for mark in &record.corrected_marks {
            let surface = crate::document::char_slice(&record.template.sample_text, mark.span.start, mark.span.end);
            if let Some(surface) = surface.filter(|s| !s.trim().is_empty()) {
                config
                    .gazetteers
                    .entry(mark.span.label.clone())
                    .or_default()
                    .insert(surface.to_string());
            }
        }
    }
    config
}

/// Job persistence: one JSON file per job, replaced atomically.
#[derive(Debug, Clone)]
pub struct JobStore {
    dir: PathBuf,
}

impl JobStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn save(&self, job: &ConversionJob) -> Result<()> {
        let json = serde_json::to_vec_pretty(job).expect("jobs serialize");
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&json)?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path_for(&job.id)).map_err(|e| PipelineError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Option<ConversionJob>> {
        let path = self.path_for(id);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load_all(&self) -> Result<Vec<ConversionJob>> {
        let mut jobs = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path)?;
                let job = serde_json::from_slice(&bytes)
                    .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
                jobs.push(job);
            }
        }
        Ok(jobs)
    }
}
