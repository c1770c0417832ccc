//! HTTP service for blind human review of synthetic records.
//!
//! Verdicts are appended to a JSONL log and folded into [`ReviewState`];
//! restarting the service replays the log, so `/stats` survives restarts.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use medaug_core::review::{read_verdicts, ReviewState, ReviewStats, ReviewVerdict, VerdictError, VerdictKind};
use medaug_core::{QARecord, Source};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(#[from] medaug_core::record::JsonlError),
    #[error("verdict log does not match the sample: {0}")]
    Replay(VerdictError),
}

struct Inner {
    state: Option<ReviewState>,
    /// reviewer → record currently handed to them.
    assignments: HashMap<String, String>,
    log: Option<File>,
}

pub struct ReviewService {
    inner: Mutex<Inner>,
    log_path: PathBuf,
    clock: Clock,
}

impl ReviewService {
    /// Loads the sample (if any) and replays the existing log at `log_path`.
    pub fn open(sample: Option<Vec<QARecord>>, log_path: &Path, reviews_per_record: usize, clock: Clock) -> Result<Self, ServiceError> {
        let verdicts = if log_path.exists() { read_verdicts(log_path)? } else { Vec::new() };
        let state = match sample {
            Some(sample) => Some(ReviewState::fold(sample, reviews_per_record, verdicts).map_err(ServiceError::Replay)?),
            None => None,
        };
        Ok(Self {
            inner: Mutex::new(Inner {
                state,
                assignments: HashMap::new(),
                log: None,
            }),
            log_path: log_path.to_path_buf(),
            clock,
        })
    }

    pub fn stats(&self) -> ReviewStats {
        let inner = self.inner.lock().expect("review state lock");
        inner.state.as_ref().map(ReviewState::stats).unwrap_or_default()
    }

    fn append(&self, inner: &mut Inner, verdict: &ReviewVerdict) -> Result<(), ServiceError> {
        let io = |source| ServiceError::Io {
            path: self.log_path.clone(),
            source,
        };
        if inner.log.is_none() {
            inner.log = Some(OpenOptions::new().create(true).append(true).open(&self.log_path).map_err(io)?);
        }
        let file = inner.log.as_mut().expect("opened above");
        let mut line = serde_json::to_vec(verdict).expect("verdict serializes");
        line.push(b'\n');
        file.write_all(&line).map_err(io)?;
        file.sync_data().map_err(io)
    }
}

/// What a reviewer sees: no source, template or seed provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindRecord {
    pub record_id: String,
    pub question: String,
    pub answer: String,
    pub category: String,
    pub reviewed: usize,
    pub total: usize,
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub reviewer: Option<String>,
}

/// POST body; `submitted_at` is filled in by the server when absent.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictBody {
    pub record_id: String,
    pub reviewer: String,
    pub fluency: u8,
    pub relevance: u8,
    pub plausibility: u8,
    pub verdict: VerdictKind,
    #[serde(default)]
    pub notes: Option<String>,
    #[serde(default)]
    pub submitted_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub record_id: String,
    pub reviewer: String,
    /// Revealed only once the verdict is in.
    pub source: Source,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn next(State(svc): State<Arc<ReviewService>>, Query(q): Query<NextQuery>) -> Response {
    let Some(reviewer) = q.reviewer.filter(|r| !r.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "query parameter reviewer is required");
    };
    let mut inner = svc.inner.lock().expect("review state lock");
    let Inner { state, assignments, .. } = &mut *inner;
    let Some(state) = state.as_ref() else {
        return error(StatusCode::NOT_FOUND, "no review sample is loaded");
    };
    if let Some(id) = assignments.get(&reviewer) {
        if !state.is_open_for(id, &reviewer) {
            assignments.remove(&reviewer);
        }
    }
    let id = match assignments.get(&reviewer) {
        Some(id) => id.clone(),
        None => {
            let mut held: HashMap<String, usize> = HashMap::new();
            for (who, id) in assignments.iter() {
                if *who != reviewer {
                    *held.entry(id.clone()).or_default() += 1;
                }
            }
            match state.next_open(&reviewer, &held) {
                Some(r) => {
                    assignments.insert(reviewer.clone(), r.id.clone());
                    r.id.clone()
                }
                None => return StatusCode::NO_CONTENT.into_response(),
            }
        }
    };
    let record = state.record(&id).expect("assigned records come from the sample");
    let stats = state.stats();
    Json(BlindRecord {
        record_id: record.id.clone(),
        question: record.question.clone(),
        answer: record.answer.clone(),
        category: record.category.clone(),
        reviewed: stats.reviewed,
        total: stats.total,
    })
    .into_response()
}

async fn submit(
    State(svc): State<Arc<ReviewService>>,
    body: Result<Json<VerdictBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let verdict = ReviewVerdict {
        record_id: body.record_id,
        reviewer: body.reviewer,
        fluency: body.fluency,
        relevance: body.relevance,
        plausibility: body.plausibility,
        verdict: body.verdict,
        notes: body.notes,
        submitted_at: body.submitted_at.unwrap_or_else(|| (svc.clock)()),
    };
    let mut inner = svc.inner.lock().expect("review state lock");
    let Some(state) = inner.state.as_ref() else {
        return error(StatusCode::NOT_FOUND, "no review sample is loaded");
    };
    match state.check(&verdict) {
        Ok(()) => {}
        Err(e @ VerdictError::Duplicate { .. }) => return error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    }
    let source = state.record(&verdict.record_id).expect("checked").source;
    // Durable first, then visible.
    if let Err(e) = svc.append(&mut inner, &verdict) {
        tracing::error!(error = %e, "failed to append verdict");
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    let reviewer = verdict.reviewer.clone();
    let record_id = verdict.record_id.clone();
    inner
        .state
        .as_mut()
        .expect("checked")
        .apply(verdict)
        .expect("checked before append");
    if inner.assignments.get(&reviewer) == Some(&record_id) {
        inner.assignments.remove(&reviewer);
    }
    (
        StatusCode::CREATED,
        Json(Submitted {
            record_id,
            reviewer,
            source,
        }),
    )
        .into_response()
}

async fn stats(State(svc): State<Arc<ReviewService>>) -> Json<ReviewStats> {
    Json(svc.stats())
}

/// CORS for the reviewer UI. An empty list allows any origin.
pub fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    if origins.is_empty() {
        return layer.allow_origin(AllowOrigin::any());
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    layer.allow_origin(list)
}

pub fn router(service: Arc<ReviewService>, origins: &[String]) -> Router {
    Router::new()
        .route("/batch/next", get(next))
        .route("/verdicts", post(submit))
        .route("/stats", get(stats))
        .layer(cors(origins))
        .with_state(service)
}

pub async fn serve(addr: SocketAddr, service: Arc<ReviewService>, origins: &[String]) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(service, origins)).await
}
