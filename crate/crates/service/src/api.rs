use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slc_core::pipeline::{contribute, retrain_baseline, Clock, ContributionQueue, JobStore, MarkEdit, SystemClock};
use slc_core::qa::{BaselineExtractor, ChunkConfig, SpanExtractor, DEFAULT_STRIDE, DEFAULT_WINDOW};
use slc_core::retrieval::{load_library, write_template_dir, MltParams, TemplateIndex};
use slc_core::tagger::{BaselineConfig, BaselineTagger, Tagger, Threshold};
use slc_core::{ConversionJob, EntityLabel};

use crate::error::ApiError;
use crate::remote::{RemoteExtractor, RemoteTagger};

/// Where the tagger comes from.
#[derive(Debug, Clone)]
pub enum TaggerSetting {
    Baseline(BaselineConfig),
    Remote(String),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/library`.
    pub library_dir: Option<PathBuf>,
    pub tagger: TaggerSetting,
    pub qa_url: Option<String>,
    pub threshold: Threshold,
    pub timeout: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            library_dir: None,
            tagger: TaggerSetting::Baseline(BaselineConfig::default()),
            qa_url: None,
            threshold: Threshold::default(),
            timeout: crate::remote::DEFAULT_TIMEOUT,
        }
    }
}

enum ActiveTagger {
    Baseline(BaselineTagger),
    Remote(RemoteTagger),
}

impl ActiveTagger {
    fn as_tagger(&self) -> &dyn Tagger {
        match self {
            ActiveTagger::Baseline(t) => t,
            ActiveTagger::Remote(t) => t,
        }
    }
}

/// Shared server state. Each job has its own lock; the index is behind a
/// reader-writer lock.
pub struct AppState {
    store: JobStore,
    jobs: Mutex<HashMap<String, Arc<Mutex<ConversionJob>>>>,
    index: RwLock<TemplateIndex>,
    queue: Mutex<ContributionQueue>,
    library_dir: PathBuf,
    tagger: RwLock<Arc<ActiveTagger>>,
    extractor: Option<Arc<RemoteExtractor>>,
    threshold: Threshold,
    timeout: Duration,
    clock: Box<dyn Clock>,
}

impl AppState {
    /// Opens the data directory, loads the library and connects to any
    /// configured model servers.
    pub fn open(config: ServiceConfig) -> Result<Self, ApiError> {
        let store = JobStore::open(config.data_dir.join("jobs"))?;
        let library_dir = config.library_dir.unwrap_or_else(|| config.data_dir.join("library"));
        let index = load_library(&library_dir, MltParams::default())?;
        let queue = ContributionQueue::open(config.data_dir.join("contributions.jsonl"))?;
        let tagger = match config.tagger {
            TaggerSetting::Baseline(c) => ActiveTagger::Baseline(BaselineTagger::new(c)?),
            TaggerSetting::Remote(url) => ActiveTagger::Remote(RemoteTagger::connect(&url, config.timeout)?),
        };
        let extractor = match &config.qa_url {
            Some(url) => Some(Arc::new(RemoteExtractor::connect(url, config.timeout)?)),
            None => None,
        };
        Ok(Self {
            store,
            jobs: Mutex::new(HashMap::new()),
            index: RwLock::new(index),
            queue: Mutex::new(queue),
            library_dir,
            tagger: RwLock::new(Arc::new(tagger)),
            extractor,
            threshold: config.threshold,
            timeout: config.timeout,
            clock: Box::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: impl Clock + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    fn job_handle(&self, id: &str) -> Result<Arc<Mutex<ConversionJob>>, ApiError> {
        let mut jobs = self.jobs.lock().expect("job table lock");
        if let Some(handle) = jobs.get(id) {
            return Ok(handle.clone());
        }
        // ids are uuids; anything else cannot name a stored file
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        let job = if safe { self.store.load(id)? } else { None };
        let job = job.ok_or_else(|| ApiError::unknown_job(id))?;
        let handle = Arc::new(Mutex::new(job));
        jobs.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    fn read_job(&self, id: &str) -> Result<ConversionJob, ApiError> {
        let handle = self.job_handle(id)?;
        let job = handle.lock().expect("job lock").clone();
        Ok(job)
    }

    /// Runs `f` on a copy of the job and commits it only if `f` succeeds
    /// and the copy is persisted.
    fn update_job<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut ConversionJob) -> Result<T, ApiError>,
    ) -> Result<(T, ConversionJob), ApiError> {
        let handle = self.job_handle(id)?;
        let mut guard = handle.lock().expect("job lock");
        let mut job = guard.clone();
        let out = f(&mut job)?;
        self.store.save(&job)?;
        *guard = job.clone();
        Ok((out, job))
    }

    fn current_tagger(&self) -> Arc<ActiveTagger> {
        self.tagger.read().expect("tagger lock").clone()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))
    })
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
struct CreateJob {
    text: String,
}

#[derive(Debug, Default, Deserialize)]
struct SelectTemplate {
    template_id: String,
}

#[derive(Debug, Default, Deserialize)]
struct AutoMark {
    threshold: Option<f64>,
    /// Overrides the server's tagger with a baseline gazetteer tagger.
    gazetteer: Option<BaselineConfig>,
}

#[derive(Debug, Default, Deserialize)]
struct EditMarks {
    edits: Vec<MarkEdit>,
}

#[derive(Debug, Default, Deserialize)]
struct Extract {
    /// Uses the baseline extractor with this answer key instead of the
    /// server's QA model.
    answers: Option<BTreeMap<String, String>>,
    window: Option<usize>,
    stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct SetValue {
    field: String,
    value: serde_json::Value,
}

#[derive(Debug, Default, Deserialize)]
struct Emit {
    #[serde(default)]
    force: bool,
}

#[derive(Debug, Default, Deserialize)]
struct Contribute {
    job_id: String,
    name: String,
}

#[derive(Debug, Deserialize)]
struct SuggestQuery {
    n: Option<usize>,
}

#[derive(Debug, Serialize)]
struct TemplateSummary {
    id: String,
    name: String,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    templates: usize,
    tagger_versions: BTreeMap<EntityLabel, String>,
    extractor: Option<String>,
}

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/jobs", post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/templates", get(suggest))
        .route("/jobs/{id}/template", put(select_template))
        .route("/jobs/{id}/marks:auto", post(auto_mark))
        .route("/jobs/{id}/marks", patch(edit_marks))
        .route("/jobs/{id}/extract", post(extract))
        .route("/jobs/{id}/values", patch(set_value))
        .route("/jobs/{id}/output", post(emit))
        .route("/templates", get(list_templates).post(contribute_template))
        .route("/retrain", post(retrain))
        .fallback(|| async { ApiError::not_found() })
        .with_state(state)
}

async fn health(State(state): Shared) -> ApiResult<Json<Health>> {
    blocking(move || {
        Ok(Json(Health {
            status: "ok",
            templates: state.index.read().expect("index lock").len(),
            tagger_versions: state.current_tagger().as_tagger().versions(),
            extractor: state.extractor.as_ref().map(|e| e.id()),
        }))
    })
    .await
}

async fn create_job(State(state): Shared, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateJob = parse_body(&body)?;
    blocking(move || {
        let job = ConversionJob::create(&req.text, state.clock.as_ref())?;
        state.store.save(&job)?;
        state
            .jobs
            .lock()
            .expect("job table lock")
            .insert(job.id().to_string(), Arc::new(Mutex::new(job.clone())));
        Ok((StatusCode::CREATED, Json(job)))
    })
    .await
}

async fn get_job(State(state): Shared, Path(id): Path<String>) -> ApiResult<Json<ConversionJob>> {
    blocking(move || state.read_job(&id).map(Json)).await
}

async fn suggest(
    State(state): Shared,
    Path(id): Path<String>,
    Query(q): Query<SuggestQuery>,
) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let job = state.read_job(&id)?;
        let index = state.index.read().expect("index lock");
        let suggestions = job.suggest_templates(&index, q.n.unwrap_or(5))?;
        Ok(Json(serde_json::json!({ "suggestions": suggestions })))
    })
    .await
}

async fn select_template(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ConversionJob>> {
    let req: SelectTemplate = parse_body(&body)?;
    blocking(move || {
        let index = state.index.read().expect("index lock");
        let ((), job) = state.update_job(&id, |job| Ok(job.select_template(&index, &req.template_id)?))?;
        Ok(Json(job))
    })
    .await
}

async fn auto_mark(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ConversionJob>> {
    let req: AutoMark = parse_body(&body)?;
    blocking(move || {
        let threshold = match req.threshold {
            Some(t) => Threshold::new(t)?,
            None => state.threshold,
        };
        let override_tagger = req.gazetteer.map(BaselineTagger::new).transpose()?;
        let server_tagger = state.current_tagger();
        let tagger: &dyn Tagger = match &override_tagger {
            Some(t) => t,
            None => server_tagger.as_tagger(),
        };
        let ((), job) = state.update_job(&id, |job| Ok(job.auto_mark(tagger, threshold)?))?;
        Ok(Json(job))
    })
    .await
}

async fn edit_marks(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ConversionJob>> {
    let req: EditMarks = parse_body(&body)?;
    blocking(move || {
        let ((), job) = state.update_job(&id, |job| Ok(job.update_marks(&req.edits)?))?;
        Ok(Json(job))
    })
    .await
}

async fn extract(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ConversionJob>> {
    let req: Extract = parse_body(&body)?;
    blocking(move || {
        let chunking = ChunkConfig {
            window: req.window.unwrap_or(DEFAULT_WINDOW),
            stride: req.stride.unwrap_or(DEFAULT_STRIDE),
        };
        let baseline = req.answers.map(BaselineExtractor::new);
        let extractor: &dyn SpanExtractor = match (&baseline, &state.extractor) {
            (Some(b), _) => b,
            (None, Some(remote)) => remote.as_ref(),
            (None, None) => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "NO_EXTRACTOR",
                    "no QA model is configured; supply an answer key",
                ))
            }
        };
        let ((), job) = state.update_job(&id, |job| Ok(job.auto_extract(extractor, chunking)?))?;
        Ok(Json(job))
    })
    .await
}

async fn set_value(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<ConversionJob>> {
    let req: SetValue = parse_body(&body)?;
    blocking(move || {
        let ((), job) = state.update_job(&id, |job| Ok(job.update_value(&req.field, req.value)?))?;
        Ok(Json(job))
    })
    .await
}

async fn emit(State(state): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: Emit = parse_body(&body)?;
    blocking(move || {
        let (output, _) = state.update_job(&id, |job| Ok(job.emit_output(req.force, state.clock.as_ref())?))?;
        Ok(Json(output))
    })
    .await
}

async fn list_templates(State(state): Shared) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let index = state.index.read().expect("index lock");
        let mut list: Vec<TemplateSummary> = index
            .records()
            .map(|r| TemplateSummary {
                id: r.id.clone(),
                name: r.name.clone(),
            })
            .collect();
        list.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Json(list))
    })
    .await
}

async fn contribute_template(State(state): Shared, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: Contribute = parse_body(&body)?;
    blocking(move || {
        let job = state.read_job(&req.job_id)?;
        let mut index = state.index.write().expect("index lock");
        let mut queue = state.queue.lock().expect("queue lock");
        let record = contribute(&job, &req.name, &mut index, &mut queue)?;
        if let Err(e) = write_template_dir(&state.library_dir, &record.template) {
            index.remove_template(&record.template.id)?;
            return Err(e.into());
        }
        Ok((StatusCode::CREATED, Json(record)))
    })
    .await
}

async fn retrain(State(state): Shared) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let records = state.queue.lock().expect("queue lock").records().to_vec();
        let current = state.current_tagger();
        let next = match current.as_ref() {
            ActiveTagger::Baseline(t) => {
                ActiveTagger::Baseline(BaselineTagger::new(retrain_baseline(t.config(), &records))?)
            }
            ActiveTagger::Remote(t) => {
                t.retrain(&records)?;
                ActiveTagger::Remote(RemoteTagger::connect(t.base_url(), state.timeout)?)
            }
        };
        let versions = next.as_tagger().versions();
        *state.tagger.write().expect("tagger lock") = Arc::new(next);
        Ok(Json(serde_json::json!({ "records": records.len(), "tagger_versions": versions })))
    })
    .await
}
