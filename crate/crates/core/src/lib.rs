//! Converts legal contract text into a Cicero template plus a Concerto data
//! instance.
//!
//! A conversion is a [`ConversionJob`]: pick a template from the library
//! ([`TemplateIndex`]), mark variables with a [`Tagger`], fill the data
//! instance with a [`SpanExtractor`], correct anything by hand, then emit.

pub mod backend;
pub mod cicero;
pub mod concerto;
pub mod document;
pub mod pipeline;
pub mod qa;
pub mod retrieval;
pub mod tagger;

pub use backend::BackendError;
pub use cicero::{apply_marks, parse_template, CiceroTemplate, Segment, TemplateError};
pub use concerto::{
    instance_from_json, instance_to_json, parse_model, validate_instance, ConcertoModel, DataInstance,
    ModelError, ValidationReport, Value,
};
pub use document::{tokenize, EntityLabel, LabeledSpan, SourceDocument, Span, Token, VariableBinding};
pub use pipeline::{
    contribute, replay, Clock, ContributionQueue, ContributionRecord, ConversionJob, ConversionOutput,
    FixedClock, JobEvent, JobStatus, JobStore, MarkEdit, PipelineError, Provenance, SystemClock,
};
pub use qa::{BaselineExtractor, ChunkConfig, SpanExtractor};
pub use retrieval::{MltParams, TemplateIndex, TemplateRecord};
pub use tagger::{BaselineConfig, BaselineTagger, Tagger, Threshold, TokenLabelMatrix};
