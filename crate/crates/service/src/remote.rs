//! HTTP clients for external tagger and QA model servers.
//!
//! Tagger server:
//! - `GET /versions` returns `{label: version}`.
//! - `POST /tag` takes `{text, tokens: [{start, end}], labels, versions}` and
//!   returns `{matrix: [{label: {b, i}}]}` with one entry per token.
//!
//! QA server:
//! - `GET /id` returns `{id}`.
//! - `POST /answer` takes `{question, context}` and returns
//!   `{start, end, start_confidence, end_confidence}` or `{abstain: true}`.
//!
//! Offsets are character offsets. Transport failures and 5xx responses are
//! retried once.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slc_core::document::{EntityLabel, Token};
use slc_core::pipeline::ContributionRecord;
use slc_core::qa::{ExtractedSpan, SpanExtractor};
use slc_core::tagger::{BioScores, Tagger, TokenLabelMatrix, TokenScores};
use slc_core::BackendError;
use ureq::Agent;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
struct Client {
    base: String,
    agent: Agent,
}

impl Client {
    fn new(base: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn once(&self, path: &str, body: Option<&serde_json::Value>) -> Result<serde_json::Value, Attempt> {
        let url = self.url(path);
        let result = match body {
            Some(body) => self.agent.post(&url).send_json(body),
            None => self.agent.get(&url).call(),
        };
        let mut response = result.map_err(|e| Attempt::Retry(format!("{url}: {e}")))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::ProtocolViolation(format!(
                "{url}: HTTP {status}"
            ))));
        }
        response
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(BackendError::ProtocolViolation(format!("{url}: {e}"))))
    }

    fn request<T: DeserializeOwned>(&self, path: &str, body: Option<&serde_json::Value>) -> Result<T, BackendError> {
        let value = match self.once(path, body) {
            Ok(v) => v,
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(_)) => match self.once(path, body) {
                Ok(v) => v,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => return Err(BackendError::RemoteUnavailable(msg)),
            },
        };
        serde_json::from_value(value)
            .map_err(|e| BackendError::ProtocolViolation(format!("{}: {e}", self.url(path))))
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

#[derive(Serialize)]
struct TokenOffsets {
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct TagResponse {
    matrix: Vec<BTreeMap<EntityLabel, BioScores>>,
    #[serde(default)]
    versions: Option<BTreeMap<EntityLabel, String>>,
}

/// Tagger backed by a model server. Versions are read once at connect time
/// and sent with every request as pins.
#[derive(Debug, Clone)]
pub struct RemoteTagger {
    client: Client,
    versions: BTreeMap<EntityLabel, String>,
}

impl RemoteTagger {
    pub fn connect(base: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = Client::new(base, timeout);
        let versions = client.request("/versions", None)?;
        Ok(Self { client, versions })
    }

    pub fn base_url(&self) -> &str {
        &self.client.base
    }

    /// Sends the contribution queue to `POST /retrain`.
    pub fn retrain(&self, records: &[ContributionRecord]) -> Result<(), BackendError> {
        let body = serde_json::json!({ "records": records });
        let _: serde_json::Value = self.client.request("/retrain", Some(&body))?;
        Ok(())
    }
}

impl Tagger for RemoteTagger {
    fn tag(&self, text: &str, tokens: &[Token]) -> Result<TokenLabelMatrix, BackendError> {
        let body = serde_json::json!({
            "text": text,
            "tokens": tokens.iter().map(|t| TokenOffsets { start: t.start, end: t.end }).collect::<Vec<_>>(),
            "labels": self.versions.keys().collect::<Vec<_>>(),
            "versions": self.versions,
        });
        let response: TagResponse = self.client.request("/tag", Some(&body))?;
        if let Some(versions) = &response.versions {
            if versions != &self.versions {
                return Err(BackendError::ProtocolViolation(format!(
                    "tagger answered with versions {versions:?}, pinned {:?}",
                    self.versions
                )));
            }
        }
        if response.matrix.len() != tokens.len() {
            return Err(BackendError::ProtocolViolation(format!(
                "matrix has {} rows for {} tokens",
                response.matrix.len(),
                tokens.len()
            )));
        }
        let rows = tokens
            .iter()
            .zip(response.matrix)
            .map(|(t, labels)| TokenScores {
                start: t.start,
                end: t.end,
                labels,
            })
            .collect();
        TokenLabelMatrix::from_rows(rows).map_err(|e| BackendError::ProtocolViolation(e.to_string()))
    }

    fn versions(&self) -> BTreeMap<EntityLabel, String> {
        self.versions.clone()
    }
}

#[derive(Deserialize)]
struct AnswerResponse {
    #[serde(default)]
    abstain: bool,
    start: Option<usize>,
    end: Option<usize>,
    start_confidence: Option<f64>,
    end_confidence: Option<f64>,
}

#[derive(Deserialize)]
struct IdResponse {
    id: String,
}

/// Span extractor backed by a QA model server.
#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    client: Client,
    id: String,
}

impl RemoteExtractor {
    pub fn connect(base: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = Client::new(base, timeout);
        let IdResponse { id } = client.request("/id", None)?;
        Ok(Self { client, id })
    }

    pub fn base_url(&self) -> &str {
        &self.client.base
    }
}

impl SpanExtractor for RemoteExtractor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn answer(&self, question: &str, context: &str) -> Result<Option<ExtractedSpan>, BackendError> {
        let body = serde_json::json!({ "question": question, "context": context });
        let r: AnswerResponse = self.client.request("/answer", Some(&body))?;
        if r.abstain {
            return Ok(None);
        }
        let missing = |name: &str| BackendError::ProtocolViolation(format!("answer is missing `{name}`"));
        Ok(Some(ExtractedSpan {
            start: r.start.ok_or_else(|| missing("start"))?,
            end: r.end.ok_or_else(|| missing("end"))?,
            start_confidence: r.start_confidence.ok_or_else(|| missing("start_confidence"))?,
            end_confidence: r.end_confidence.ok_or_else(|| missing("end_confidence"))?,
        }))
    }
}
