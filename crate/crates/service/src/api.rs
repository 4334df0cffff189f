//! HTTP surface. Model-bound routes carry the version in the first path
//! segment (`/v1/...`); everything else is version-free.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Notify;

use scrapline::annotation::{AnnotationError, AnnotationStore, Grade, SeniorLabel};
use scrapline::pipeline::{
    Broker, FinalizeRequest, IngestMessage, IngestOutcome, OverrideRequest, OverrideValue, Pipeline, PipelineError,
    RationaleCode, RejectReason, Role,
};

pub const TOKEN_HEADER: &str = "x-role-token";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operator {
    pub id: String,
    pub role: Role,
}

struct Inner {
    pipeline: Arc<Pipeline>,
    broker: Mutex<Option<Broker>>,
    annotations: Arc<AnnotationStore>,
    tokens: HashMap<String, Operator>,
    started: Instant,
    notify: Arc<Notify>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, annotations: Arc<AnnotationStore>, tokens: HashMap<String, Operator>) -> Self {
        let notify = Arc::new(Notify::new());
        let n = notify.clone();
        pipeline.events().subscribe(move |_| n.notify_waiters());
        let broker = Broker::start(pipeline.clone());
        Self(Arc::new(Inner {
            pipeline,
            broker: Mutex::new(Some(broker)),
            annotations,
            tokens,
            started: Instant::now(),
            notify,
        }))
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.0.pipeline
    }

    pub fn annotations(&self) -> &Arc<AnnotationStore> {
        &self.0.annotations
    }

    /// Stops taking layers and waits for every line queue to drain.
    pub fn drain(&self) {
        if let Some(b) = self.0.broker.lock().expect("broker lock").take() {
            let t = b.shutdown();
            log::info!("drained line queues: {t:?}");
        }
    }

    fn operator(&self, headers: &HeaderMap) -> Result<Operator, ApiError> {
        let token = headers
            .get(TOKEN_HEADER)
            .and_then(|v| v.to_str().ok())
            .or_else(|| {
                headers
                    .get("authorization")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.strip_prefix("Bearer "))
            })
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing_token", "role token required"))?;
        self.0
            .tokens
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown_token", "role token not recognized"))
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use PipelineError::*;
        let (status, code) = match &e {
            UnknownVersion(_) => (StatusCode::NOT_FOUND, "version_not_found"),
            RetiredVersion(_) => (StatusCode::GONE, "version_gone"),
            UnknownRailcar(_) | NoReport(_) => (StatusCode::NOT_FOUND, "not_found"),
            MissingRationale => (StatusCode::UNPROCESSABLE_ENTITY, "missing_rationale"),
            Forbidden { .. } => (StatusCode::FORBIDDEN, "forbidden"),
            InvalidTransition { .. } => (StatusCode::CONFLICT, "invalid_transition"),
            Conflict { .. } => (StatusCode::CONFLICT, "version_conflict"),
            InvalidOverride(_) | InvalidPolicy(_) | InvalidTag(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            TagCollision(_) => (StatusCode::CONFLICT, "tag_collision"),
            BrokerClosed => (StatusCode::SERVICE_UNAVAILABLE, "draining"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        use AnnotationError::*;
        let (status, code) = match &e {
            UnknownRecord(_) => (StatusCode::NOT_FOUND, "not_found"),
            NotAdjudicable(_) => (StatusCode::CONFLICT, "not_adjudicable"),
            Empty(_) | LabelOutOfRange(_) | UnknownGrade(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// `v3` -> 3.
fn parse_version(seg: &str) -> ApiResult<u32> {
    seg.strip_prefix('v').and_then(|n| n.parse().ok()).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "version_not_found",
            format!("bad version segment `{seg}`"),
        )
    })
}

fn require(op: &Operator, role: Role, action: &'static str) -> ApiResult<()> {
    if op.role != role {
        return Err(PipelineError::Forbidden { role: op.role, action }.into());
    }
    Ok(())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/{version}/lines/{line}/layers", post(ingest))
        .route("/{version}/railcars/{id}/finalize", post(finalize))
        .route("/railcars", get(list_reports))
        .route("/railcars/{id}/report", get(report))
        .route("/railcars/{id}/override", post(apply_override))
        .route("/queue/active-learning", get(queue))
        .route("/annotations/flagged", get(flagged))
        .route("/annotations/{id}/adjudicate", post(adjudicate))
        .route("/policy", get(policy).put(update_policy))
        .route("/events/stream", get(events))
        .with_state(state)
}

async fn healthz(State(s): State<AppState>) -> Json<serde_json::Value> {
    let p = s.pipeline();
    let models: Vec<_> = p
        .registry()
        .list()
        .into_iter()
        .map(|(r, retired)| json!({"version": format!("v{}", r.version), "tag": r.tag, "checkpoint_sha256": r.checkpoint_sha256, "retired": retired}))
        .collect();
    let latest = p.registry().latest().map(|e| e.reference);
    Json(json!({
        "status": "ok",
        "version": latest.as_ref().map(|r| format!("v{}", r.version)),
        "model_tag": latest.as_ref().map(|r| r.tag.clone()),
        "checkpoint_sha256": latest.as_ref().map(|r| r.checkpoint_sha256.clone()),
        "models": models,
        "uptime_s": s.0.started.elapsed().as_secs_f64(),
        "lines": p.config().lines,
        "policy": p.policy(),
        "layer_latency": p.layer_latency(),
        "finalize_latency": p.finalize_latency(),
    }))
}

async fn ingest(
    State(s): State<AppState>,
    Path((version, line)): Path<(String, u16)>,
    body: Bytes,
) -> ApiResult<Response> {
    let version = parse_version(&version)?;
    s.pipeline().registry().get(version)?;
    let rejected = |reason: RejectReason| {
        Ok((
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(IngestOutcome::Rejected { reason }),
        )
            .into_response())
    };
    let msg: IngestMessage = match serde_json::from_slice(&body) {
        Ok(m) => m,
        Err(e) => return rejected(RejectReason::Schema(e.to_string())),
    };
    if msg.line != line {
        return rejected(RejectReason::Schema(format!(
            "path line {line} but message line {}",
            msg.line
        )));
    }
    let rx = {
        let guard = s.0.broker.lock().expect("broker lock");
        let broker = guard.as_ref().ok_or(PipelineError::BrokerClosed)?;
        broker.submit(version, msg)?
    };
    let out = tokio::task::spawn_blocking(move || rx.recv())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|_| PipelineError::BrokerClosed)??;
    let status = match out {
        IngestOutcome::Accepted => StatusCode::CREATED,
        IngestOutcome::Duplicate => StatusCode::OK,
        IngestOutcome::Rejected { .. } => StatusCode::UNPROCESSABLE_ENTITY,
    };
    Ok((status, Json(out)).into_response())
}

async fn finalize(
    State(s): State<AppState>,
    Path((version, id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let version = parse_version(&version)?;
    s.pipeline().registry().get(version)?;
    let req: FinalizeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FinalizeRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))?
    };
    let p = s.pipeline().clone();
    let report = tokio::task::spawn_blocking(move || p.finalize(version, &id, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct ListQuery {
    line: Option<u16>,
}

async fn list_reports(State(s): State<AppState>, Query(q): Query<ListQuery>) -> Response {
    let reports: Vec<_> = s
        .pipeline()
        .reports()
        .into_iter()
        .filter(|r| q.line.is_none_or(|l| l == r.line))
        .collect();
    Json(reports).into_response()
}

async fn report(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.pipeline().report(&id)?).into_response())
}

#[derive(Deserialize)]
struct OverrideBody {
    change: OverrideValue,
    #[serde(default)]
    rationale: Option<String>,
    #[serde(default)]
    note: Option<String>,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn apply_override(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let op = s.operator(&headers)?;
    let body: OverrideBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", e.to_string()))?;
    let rationale = match body.rationale.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(code) => Some(serde_json::from_value::<RationaleCode>(json!(code)).map_err(|_| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_rationale",
                format!("unknown rationale code `{code}`"),
            )
        })?),
    };
    let req = OverrideRequest {
        operator_id: op.id,
        role: op.role,
        change: body.change,
        rationale,
        note: body.note,
        expected_version: body.expected_version,
    };
    Ok(Json(s.pipeline().apply_override(&id, &req)?).into_response())
}

async fn queue(State(s): State<AppState>) -> Response {
    Json(s.pipeline().queue()).into_response()
}

async fn flagged(State(s): State<AppState>, headers: HeaderMap) -> ApiResult<Response> {
    let op = s.operator(&headers)?;
    require(&op, Role::Senior, "view the adjudication inbox")?;
    Ok(Json(s.annotations().pending_adjudication()).into_response())
}

#[derive(Deserialize)]
struct AdjudicateBody {
    #[serde(default)]
    contamination: Option<f64>,
    #[serde(default)]
    grade: Option<Grade>,
}

async fn adjudicate(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<AdjudicateBody>,
) -> ApiResult<Response> {
    let op = s.operator(&headers)?;
    require(&op, Role::Senior, "adjudicate")?;
    let rec = s.annotations().adjudicate(
        &id,
        SeniorLabel {
            senior: op.id,
            contamination: body.contamination,
            grade: body.grade,
        },
    )?;
    Ok(Json(rec).into_response())
}

async fn policy(State(s): State<AppState>) -> Response {
    Json(json!({"current": s.pipeline().policy(), "history": s.pipeline().policy_history()})).into_response()
}

#[derive(Deserialize)]
struct PolicyBody {
    contamination_threshold: f64,
    confidence_threshold: f64,
}

async fn update_policy(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<PolicyBody>,
) -> ApiResult<Response> {
    let op = s.operator(&headers)?;
    require(&op, Role::Senior, "change the escalation policy")?;
    let p = s
        .pipeline()
        .update_policy(body.contamination_threshold, body.confidence_threshold, &op.id)?;
    Ok(Json(p).into_response())
}

#[derive(Deserialize)]
struct StreamQuery {
    cursor: Option<u64>,
    /// `false` sends the backlog and closes.
    follow: Option<bool>,
}

const STREAM_BATCH: usize = 256;

async fn events(
    State(s): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<StreamQuery>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let cursor = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .or(q.cursor)
        .unwrap_or(0);
    let follow = q.follow.unwrap_or(true);
    let st = stream::unfold(
        (s, cursor, Vec::new()),
        move |(s, mut cursor, mut pending)| async move {
            loop {
                if let Some(ev) = pending.pop() {
                    return Some((Ok(ev), (s, cursor, pending)));
                }
                let notified = s.0.notify.notified();
                let batch = s.pipeline().events().since(cursor, STREAM_BATCH);
                if batch.is_empty() {
                    if !follow {
                        return None;
                    }
                    let _ = tokio::time::timeout(Duration::from_secs(15), notified).await;
                    continue;
                }
                cursor = batch.last().map_or(cursor, |e| e.seq);
                pending = batch
                    .into_iter()
                    .rev()
                    .map(|e| {
                        let kind = serde_json::to_value(e.kind).ok();
                        let name = kind.as_ref().and_then(|k| k.as_str()).unwrap_or("event").to_string();
                        Event::default()
                            .id(e.seq.to_string())
                            .event(name)
                            .data(serde_json::to_string(&e).unwrap_or_default())
                    })
                    .collect();
            }
        },
    );
    Sse::new(st).keep_alive(KeepAlive::default())
}
