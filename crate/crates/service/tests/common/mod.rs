#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use slc_core::document::{char_slice, EntityLabel, Token};
use slc_core::qa::{BaselineExtractor, SpanExtractor};
use slc_core::tagger::{BaselineConfig, BaselineTagger, Tagger};
use slc_service::{AppState, ServiceConfig, TaggerSetting};
use ureq::Agent;

pub const CONTRACT: &str = "Bob will be deemed to have completed its delivery obligations if in Alice's opinion, the Widgets satisfies the Acceptance Criteria, and Alice notifies Bob in writing that she is accepting the Widgets.";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn gazetteer() -> BaselineConfig {
    BaselineConfig::default().with_phrases(EntityLabel::party(), ["Bob", "Alice"])
}

pub fn answers() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("shipper".to_string(), "Bob".to_string()),
        ("receiver".to_string(), "Alice".to_string()),
        ("deliverable".to_string(), "the Widgets".to_string()),
    ])
}

/// A server running on its own runtime; stops when dropped.
pub struct Running {
    pub base: String,
    runtime: Option<tokio::runtime::Runtime>,
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

pub fn spawn(router: Router) -> Running {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, router).await.unwrap() });
    Running {
        base: format!("http://{addr}"),
        runtime: Some(runtime),
    }
}

/// Model server double built on the baseline tagger and extractor.
pub struct Stub {
    pub tagger: BaselineTagger,
    pub extractor: BaselineExtractor,
    /// Requests to answer with HTTP 500 before behaving.
    pub failures: AtomicUsize,
    pub drop_end_confidence: bool,
    pub calls: AtomicUsize,
}

impl Stub {
    pub fn new(config: BaselineConfig, answers: BTreeMap<String, String>) -> Arc<Self> {
        Arc::new(Self {
            tagger: BaselineTagger::new(config).unwrap(),
            extractor: BaselineExtractor::new(answers),
            failures: AtomicUsize::new(0),
            drop_end_confidence: false,
            calls: AtomicUsize::new(0),
        })
    }

    fn fail(&self) -> bool {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

type StubState = State<Arc<Stub>>;

async fn versions(State(stub): StubState) -> impl IntoResponse {
    if stub.fail() {
        return StatusCode::INTERNAL_SERVER_ERROR.into_response();
    }
    Json(stub.tagger.versions()).into_response()
}

async fn tag(State(stub): StubState, Json(req): Json<Value>) -> impl IntoResponse {
    if stub.fail() {
        return StatusCode::INTERNAL_SERVER_ERROR.into_response();
    }
    let text = req["text"].as_str().unwrap_or_default();
    let tokens: Vec<Token> = req["tokens"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|t| {
            let (start, end) = (t["start"].as_u64().unwrap() as usize, t["end"].as_u64().unwrap() as usize);
            Token {
                surface: char_slice(text, start, end).unwrap_or_default().to_string(),
                start,
                end,
            }
        })
        .collect();
    let matrix = stub.tagger.tag(text, &tokens).unwrap();
    let rows: Vec<_> = matrix.rows().iter().map(|r| r.labels.clone()).collect();
    Json(json!({ "matrix": rows, "versions": stub.tagger.versions() })).into_response()
}

async fn id(State(stub): StubState) -> impl IntoResponse {
    Json(json!({ "id": stub.extractor.id() }))
}

async fn answer(State(stub): StubState, Json(req): Json<Value>) -> impl IntoResponse {
    if stub.fail() {
        return StatusCode::INTERNAL_SERVER_ERROR.into_response();
    }
    let question = req["question"].as_str().unwrap_or_default();
    let context = req["context"].as_str().unwrap_or_default();
    match stub.extractor.answer(question, context).unwrap() {
        None => Json(json!({ "abstain": true })).into_response(),
        Some(span) => {
            let mut body = serde_json::to_value(span).unwrap();
            if stub.drop_end_confidence {
                body.as_object_mut().unwrap().remove("end_confidence");
            }
            Json(body).into_response()
        }
    }
}

async fn retrain(State(stub): StubState, Json(req): Json<Value>) -> impl IntoResponse {
    let n = req["records"].as_array().map_or(0, Vec::len);
    let _ = stub;
    Json(json!({ "queued": n }))
}

pub fn stub_router(stub: Arc<Stub>) -> Router {
    Router::new()
        .route("/versions", get(versions))
        .route("/tag", post(tag))
        .route("/id", get(id))
        .route("/answer", post(answer))
        .route("/retrain", post(retrain))
        .with_state(stub)
}

/// Starts the service over a copy of the fixture library.
pub fn start_service(data_dir: &std::path::Path, tagger: TaggerSetting, qa_url: Option<String>) -> Running {
    let mut config = ServiceConfig::new(data_dir);
    config.library_dir = Some(copy_library(data_dir));
    config.tagger = tagger;
    config.qa_url = qa_url;
    let state = AppState::open(config).map_err(|e| e.message).unwrap();
    spawn(slc_service::router(Arc::new(state)))
}

pub fn copy_library(data_dir: &std::path::Path) -> PathBuf {
    let target = data_dir.join("library");
    for entry in std::fs::read_dir(fixtures().join("library")).unwrap() {
        let entry = entry.unwrap();
        let dir = target.join(entry.file_name());
        std::fs::create_dir_all(&dir).unwrap();
        for file in std::fs::read_dir(entry.path()).unwrap() {
            let file = file.unwrap();
            std::fs::copy(file.path(), dir.join(file.file_name())).unwrap();
        }
    }
    target
}

pub struct Http {
    agent: Agent,
    pub base: String,
}

impl Http {
    pub fn new(base: &str) -> Self {
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            agent,
            base: base.to_string(),
        }
    }

    pub fn call(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let url = format!("{}{path}", self.base);
        let result = match (method, body) {
            ("GET", _) => self.agent.get(&url).call(),
            ("POST", Some(b)) => self.agent.post(&url).send_json(b),
            ("POST", None) => self.agent.post(&url).send_empty(),
            ("PUT", Some(b)) => self.agent.put(&url).send_json(b),
            ("PATCH", Some(b)) => self.agent.patch(&url).send_json(b),
            (m, _) => panic!("unsupported method {m}"),
        };
        let mut response = result.unwrap();
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().unwrap();
        let value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, value)
    }

    pub fn ok(&self, method: &str, path: &str, body: Option<Value>) -> Value {
        let (status, value) = self.call(method, path, body);
        assert!((200..300).contains(&status), "{method} {path} -> {status}: {value}");
        value
    }
}

/// The delivery-clause walk over HTTP. `models` carries the per-request
/// baseline overrides; pass `None` to use the server's own models.
pub fn http_walk(http: &Http, models: Option<(&BaselineConfig, &BTreeMap<String, String>)>) -> Value {
    let job = http.ok("POST", "/jobs", Some(json!({ "text": CONTRACT })));
    let id = job["id"].as_str().unwrap().to_string();
    let suggestions = http.ok("GET", &format!("/jobs/{id}/templates?n=3"), None);
    assert_eq!(suggestions["suggestions"][0]["id"], "acceptance-of-delivery");
    http.ok(
        "PUT",
        &format!("/jobs/{id}/template"),
        Some(json!({ "template_id": "acceptance-of-delivery" })),
    );
    let (mark_body, extract_body) = match models {
        Some((g, a)) => (json!({ "threshold": 0.5, "gazetteer": g }), json!({ "answers": a })),
        None => (json!({ "threshold": 0.5 }), json!({})),
    };
    http.ok("POST", &format!("/jobs/{id}/marks:auto"), Some(mark_body));
    http.ok("POST", &format!("/jobs/{id}/extract"), Some(extract_body));
    http.ok("POST", &format!("/jobs/{id}/output"), Some(json!({ "force": false })))
}

/// Provenance with the wall-clock timestamps removed.
pub fn without_timestamps(output: &Value) -> Value {
    let mut output = output.clone();
    let provenance = output["provenance"].as_object_mut().unwrap();
    provenance.remove("created_at");
    provenance.remove("emitted_at");
    output
}
