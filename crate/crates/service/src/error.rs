use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use slc_core::cicero::TemplateError;
use slc_core::qa::QaError;
use slc_core::retrieval::IndexError;
use slc_core::tagger::TaggerError;
use slc_core::{BackendError, PipelineError};

/// The JSON error envelope returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: impl Serialize) -> Self {
        self.details = serde_json::to_value(details).ok();
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    pub fn unknown_job(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UNKNOWN_JOB", format!("no job with id `{id}`"))
    }

    pub fn not_found() -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such route")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::BAD_GATEWAY);
        (status, Json(self)).into_response()
    }
}

fn backend(e: &BackendError) -> (StatusCode, &'static str) {
    match e {
        BackendError::RemoteUnavailable(_) => (StatusCode::BAD_GATEWAY, "REMOTE_UNAVAILABLE"),
        BackendError::ProtocolViolation(_) => (StatusCode::BAD_GATEWAY, "PROTOCOL_VIOLATION"),
    }
}

fn index(e: &IndexError) -> (StatusCode, &'static str) {
    match e {
        IndexError::DuplicateId(_) => (StatusCode::CONFLICT, "DUPLICATE_NAME"),
        IndexError::UnknownId(_) => (StatusCode::NOT_FOUND, "UNKNOWN_TEMPLATE"),
        IndexError::EmptyIndex => (StatusCode::CONFLICT, "EMPTY_INDEX"),
        IndexError::EmptySample(_) => (StatusCode::BAD_REQUEST, "EMPTY_SAMPLE"),
        IndexError::Io(_) => (StatusCode::BAD_GATEWAY, "STORAGE_UNAVAILABLE"),
    }
}

/// Status and stable code for a pipeline failure.
pub fn classify(e: &PipelineError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        PipelineError::EmptyDocument => (S::BAD_REQUEST, "EMPTY_DOCUMENT"),
        PipelineError::InvalidState { .. } => (S::CONFLICT, "INVALID_STATE"),
        PipelineError::UnknownTemplate(_) => (S::NOT_FOUND, "UNKNOWN_TEMPLATE"),
        PipelineError::NoContractClass => (S::UNPROCESSABLE_ENTITY, "NO_CONTRACT_CLASS"),
        PipelineError::UnknownField(_) => (S::UNPROCESSABLE_ENTITY, "UNKNOWN_FIELD"),
        PipelineError::UnknownMark(_) => (S::UNPROCESSABLE_ENTITY, "UNKNOWN_MARK"),
        PipelineError::UnknownType(_) => (S::UNPROCESSABLE_ENTITY, "UNKNOWN_TYPE"),
        PipelineError::ValidationFailed(_) => (S::UNPROCESSABLE_ENTITY, "VALIDATION_FAILED"),
        PipelineError::DuplicateName(_) => (S::CONFLICT, "DUPLICATE_NAME"),
        PipelineError::ReplayMismatch(_) => (S::CONFLICT, "REPLAY_MISMATCH"),
        PipelineError::Io(_) => (S::BAD_GATEWAY, "STORAGE_UNAVAILABLE"),
        PipelineError::Template(TemplateError::DuplicateVariable(_)) => (S::CONFLICT, "DUPLICATE_VARIABLE"),
        PipelineError::Template(TemplateError::OverlappingMarks(..)) => (S::CONFLICT, "OVERLAPPING_MARKS"),
        PipelineError::Template(TemplateError::UnalignedMark(..)) => (S::UNPROCESSABLE_ENTITY, "UNALIGNED_MARK"),
        PipelineError::Template(TemplateError::InvalidVariableName { .. }) => {
            (S::UNPROCESSABLE_ENTITY, "INVALID_VARIABLE_NAME")
        }
        PipelineError::Template(_) => (S::UNPROCESSABLE_ENTITY, "TEMPLATE_ERROR"),
        PipelineError::Model(_) => (S::UNPROCESSABLE_ENTITY, "MODEL_ERROR"),
        PipelineError::Index(e) => index(e),
        PipelineError::Tagger(TaggerError::InvalidThreshold(_)) => (S::BAD_REQUEST, "INVALID_THRESHOLD"),
        PipelineError::Tagger(_) => (S::UNPROCESSABLE_ENTITY, "TAGGER_ERROR"),
        PipelineError::Qa(QaError::InvalidStride { .. }) => (S::BAD_REQUEST, "INVALID_CHUNKING"),
        PipelineError::Qa(QaError::Model(_)) => (S::UNPROCESSABLE_ENTITY, "MODEL_ERROR"),
        PipelineError::Qa(QaError::Backend(e)) => backend(e),
        PipelineError::Qa(QaError::MisalignedSpan { .. } | QaError::InvalidConfidence(_)) => {
            (S::BAD_GATEWAY, "PROTOCOL_VIOLATION")
        }
        PipelineError::Backend(e) => backend(e),
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = classify(&e);
        let error = ApiError::new(status, code, e.to_string());
        match e {
            PipelineError::ValidationFailed(report) => error.with_details(report),
            PipelineError::InvalidState { status, .. } => error.with_details(serde_json::json!({ "status": status })),
            _ => error,
        }
    }
}

impl From<IndexError> for ApiError {
    fn from(e: IndexError) -> Self {
        PipelineError::Index(e).into()
    }
}

impl From<TaggerError> for ApiError {
    fn from(e: TaggerError) -> Self {
        PipelineError::Tagger(e).into()
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        PipelineError::Backend(e).into()
    }
}
