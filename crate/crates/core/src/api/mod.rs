//! HTTP surface. All timestamps are integer nanoseconds.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::kg::{KgEdge, KgError, KgNode, TruthTable};
use crate::models::{Dataset, ModelError};
use crate::platform::Platform;
use crate::slb::{SlbError, WorkflowSpec};
use crate::stream::{
    ControlCommand, Delivery, RegistryError, ServiceDescriptor, StreamError, TimestampNs, TopicDescriptor,
    DEFAULT_SUBSCRIBER_BUFFER,
};

pub const TRUNCATED_HEADER: &str = "x-adaptloop-truncated";
pub const OUT_OF_RETENTION_HEADER: &str = "x-adaptloop-out-of-retention";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl ToString) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StreamError> for ApiError {
    fn from(e: StreamError) -> Self {
        let status = match e {
            StreamError::UnknownTopic(_) => StatusCode::NOT_FOUND,
            StreamError::InvalidTopic(_)
            | StreamError::InvalidPayload(_)
            | StreamError::InvalidRange { .. }
            | StreamError::Decode(_) => StatusCode::BAD_REQUEST,
            StreamError::SeqRegression { .. } => StatusCode::CONFLICT,
            StreamError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let status = match e {
            RegistryError::InvalidDescriptor(_) => StatusCode::BAD_REQUEST,
            RegistryError::UnknownService(_) => StatusCode::NOT_FOUND,
            RegistryError::AlreadyRegistered(_) | RegistryError::IllegalTransition { .. } => StatusCode::CONFLICT,
        };
        Self::new(status, e)
    }
}

impl From<KgError> for ApiError {
    fn from(e: KgError) -> Self {
        let status = match e {
            KgError::NoTable { .. } | KgError::UnknownTable(_) => StatusCode::NOT_FOUND,
            KgError::DuplicateKey { .. } | KgError::AlphabetInUse(_) => StatusCode::CONFLICT,
            KgError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e)
    }
}

impl From<SlbError> for ApiError {
    fn from(e: SlbError) -> Self {
        let status = match e {
            SlbError::UnknownWorkflow(_) => StatusCode::NOT_FOUND,
            SlbError::DuplicateWorkflow(_) | SlbError::NotRunning(_) => StatusCode::CONFLICT,
            SlbError::Stream(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e)
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::UnknownModel(_)
            | ModelError::NotDeployed(_)
            | ModelError::UnknownWeights(_)
            | ModelError::UnknownDataset(_) => StatusCode::NOT_FOUND,
            ModelError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e)
    }
}

type ApiResult<T> = Result<T, ApiError>;
type AppState = State<Arc<Platform>>;

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/topics", get(list_topics).post(create_topic))
        .route("/ingest", post(ingest))
        .route("/stream/{topic}", get(stream_topic))
        .route("/query/{topic}", get(query_topic))
        .route("/services", get(list_services).post(register_service))
        .route("/services/{id}", get(get_service))
        .route("/services/{id}/control", post(control_service))
        .route("/kg", get(kg_export))
        .route("/kg/nodes", get(kg_nodes).post(kg_put_node))
        .route("/kg/nodes/{id}", get(kg_node))
        .route("/kg/edges", get(kg_edges).post(kg_put_edge))
        .route("/kg/tables", get(kg_tables).post(kg_put_table))
        .route("/kg/tables/{id}", get(kg_table))
        .route("/kg/pairs", get(kg_pairs))
        .route("/slb/workflows", get(list_workflows).post(create_workflow))
        .route("/slb/workflows/{id}", get(get_workflow).delete(stop_workflow))
        .route("/slb/workflows/{id}/start", post(start_workflow))
        .route("/slb/workflows/{id}/stats", get(workflow_stats))
        .route("/slb/records", get(records))
        .route("/models", get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/predict", get(predict_get).post(predict_post))
        .route("/models/{id}/deploy", post(deploy))
        .route("/trainer/status", get(trainer_status))
        .route("/trainer/approve", post(trainer_approve))
        .route("/trainer/poll", post(trainer_poll))
        .route("/datasets/{version}", get(dataset))
        .with_state(platform)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_topics(State(p): AppState) -> ApiResult<Json<Value>> {
    let mut names = p.broker.topic_names();
    names.sort();
    let topics = names
        .iter()
        .map(|t| {
            Ok(json!({
                "topic": t,
                "published": p.broker.published_count(t)?,
                "subscribers": p.broker.subscriber_count(t)?,
            }))
        })
        .collect::<Result<Vec<_>, StreamError>>()?;
    Ok(Json(Value::Array(topics)))
}

async fn create_topic(State(p): AppState, Json(desc): Json<TopicDescriptor>) -> ApiResult<(StatusCode, Json<Value>)> {
    let topic = desc.topic.clone();
    p.broker.create_topic(desc)?;
    Ok((StatusCode::CREATED, Json(json!({ "topic": topic }))))
}

async fn ingest(State(p): AppState, headers: HeaderMap, body: Bytes) -> Response {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    match p.receiver.receive(auth, &body) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => {
            let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            ApiError::new(status, e).into_response()
        }
    }
}

#[derive(Debug, Deserialize)]
struct StreamParams {
    buffer: Option<usize>,
}

/// Live tail as server-sent events. A consumer that falls a full buffer
/// behind receives one `lagged` event and the stream ends.
async fn stream_topic(
    State(p): AppState,
    Path(topic): Path<String>,
    Query(q): Query<StreamParams>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let buffer = q.buffer.unwrap_or(DEFAULT_SUBSCRIBER_BUFFER).max(1);
    let sub = p.broker.subscribe_live(&topic, buffer)?;
    let events = futures::stream::unfold(Some(sub), |state| async move {
        let mut sub = state?;
        match sub.recv().await? {
            Delivery::Envelope(env) => {
                let data = String::from_utf8(env.to_canonical_json()).expect("json is utf-8");
                Some((Ok(Event::default().data(data)), Some(sub)))
            }
            Delivery::Lagged => Some((Ok(Event::default().event("lagged").data("lagged")), None)),
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    t0: Option<TimestampNs>,
    t1: Option<TimestampNs>,
}

impl RangeParams {
    fn bounds(&self) -> (TimestampNs, TimestampNs) {
        (self.t0.unwrap_or(TimestampNs::MIN), self.t1.unwrap_or(TimestampNs::MAX))
    }
}

/// JSON array of canonical envelope encodings in `[t0, t1]`.
async fn query_topic(State(p): AppState, Path(topic): Path<String>, Query(q): Query<RangeParams>) -> ApiResult<Response> {
    let (t0, t1) = q.bounds();
    let result = p.broker.query_range(&topic, t0, t1)?;
    let mut body = Vec::with_capacity(2 + result.records.len() * 128);
    body.push(b'[');
    for (i, env) in result.envelopes().enumerate() {
        if i > 0 {
            body.push(b',');
        }
        body.extend_from_slice(&env.to_canonical_json());
    }
    body.push(b']');
    let flag = |b: bool| HeaderValue::from_static(if b { "true" } else { "false" });
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::HeaderName::from_static(TRUNCATED_HEADER), flag(result.truncated)),
            (header::HeaderName::from_static(OUT_OF_RETENTION_HEADER), flag(result.out_of_retention)),
        ],
        body,
    )
        .into_response())
}

async fn list_services(State(p): AppState) -> Json<Vec<ServiceDescriptor>> {
    let mut list = p.services.list();
    list.sort_by(|a, b| a.service_id.cmp(&b.service_id));
    Json(list)
}

async fn register_service(
    State(p): AppState,
    Json(desc): Json<ServiceDescriptor>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let id = p.services.register(desc)?;
    Ok((StatusCode::CREATED, Json(json!({ "service_id": id }))))
}

async fn get_service(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<ServiceDescriptor>> {
    p.services
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::from(RegistryError::UnknownService(id)))
}

#[derive(Debug, Deserialize)]
struct ControlBody {
    command: ControlCommand,
    #[serde(default)]
    metadata: Option<std::collections::BTreeMap<String, String>>,
}

async fn control_service(
    State(p): AppState,
    Path(id): Path<String>,
    Json(body): Json<ControlBody>,
) -> ApiResult<Json<Value>> {
    let state = p.services.control(&id, body.command, body.metadata)?;
    Ok(Json(json!({ "service_id": id, "control_state": state })))
}

async fn kg_export(State(p): AppState) -> Json<Value> {
    let snap = p.kg.snapshot();
    let mut doc = serde_json::to_value(snap.to_document()).expect("kg serializes");
    doc["version"] = json!(snap.version);
    Json(doc)
}

async fn kg_nodes(State(p): AppState) -> Json<Vec<KgNode>> {
    Json(p.kg.snapshot().nodes.values().cloned().collect())
}

async fn kg_node(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<KgNode>> {
    p.kg
        .snapshot()
        .node(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown node {id}")))
}

async fn kg_put_node(State(p): AppState, Json(node): Json<KgNode>) -> ApiResult<Json<Value>> {
    let id = p.kg.upsert_node(node)?;
    Ok(Json(json!({ "node_id": id })))
}

async fn kg_edges(State(p): AppState) -> Json<Vec<KgEdge>> {
    Json(p.kg.snapshot().edges.values().cloned().collect())
}

async fn kg_put_edge(State(p): AppState, Json(edge): Json<KgEdge>) -> ApiResult<Json<Value>> {
    let id = p.kg.upsert_edge(edge)?;
    Ok(Json(json!({ "edge_id": id })))
}

async fn kg_tables(State(p): AppState) -> Json<Vec<TruthTable>> {
    Json(p.kg.snapshot().tables.values().cloned().collect())
}

async fn kg_table(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<TruthTable>> {
    Ok(Json(p.kg.table_by_id(&id)?))
}

async fn kg_put_table(State(p): AppState, Json(table): Json<TruthTable>) -> ApiResult<Json<Value>> {
    let id = p.kg.put_truth_table(table)?;
    Ok(Json(json!({ "table_id": id })))
}

async fn kg_pairs(State(p): AppState) -> Json<Value> {
    Json(json!(p.kg.list_causal_pairs()))
}

async fn list_workflows(State(p): AppState) -> Json<Value> {
    Json(json!(p.engine.list()))
}

#[derive(Debug, Deserialize)]
struct CreateParams {
    start: Option<bool>,
}

/// Creates a workflow and, unless `?start=false`, starts it.
async fn create_workflow(
    State(p): AppState,
    Query(q): Query<CreateParams>,
    Json(spec): Json<WorkflowSpec>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let id = p.engine.create_workflow(spec)?;
    let start = q.start.unwrap_or(true);
    if start {
        p.engine.start(&id)?;
    }
    Ok((StatusCode::CREATED, Json(json!({ "workflow_id": id, "running": start }))))
}

async fn get_workflow(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let spec = p.engine.spec(&id)?;
    let stats = p.engine.stats(&id)?;
    Ok(Json(json!({ "spec": spec, "stats": stats })))
}

async fn start_workflow(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    p.engine.start(&id)?;
    Ok(Json(json!(p.engine.stats(&id)?)))
}

/// Stops the workflow; the response carries its final counters.
async fn stop_workflow(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.engine.stop(&id)?)))
}

async fn workflow_stats(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.engine.stats(&id)?)))
}

#[derive(Debug, Deserialize)]
struct RecordParams {
    workflow: Option<String>,
    t0: Option<TimestampNs>,
    t1: Option<TimestampNs>,
}

async fn records(State(p): AppState, Query(q): Query<RecordParams>) -> ApiResult<Json<Value>> {
    if let (Some(a), Some(b)) = (q.t0, q.t1) {
        if a > b {
            return Err(StreamError::InvalidRange { t0: a, t1: b }.into());
        }
    }
    Ok(Json(json!(p.labels.query(q.workflow.as_deref(), q.t0, q.t1))))
}

async fn list_models(State(p): AppState) -> Json<Value> {
    let models: Vec<Value> = p
        .registry
        .model_ids()
        .into_iter()
        .map(|id| json!({ "model_id": id, "deployed_ref": p.registry.deployed_ref(&id) }))
        .collect();
    Json(Value::Array(models))
}

async fn get_model(State(p): AppState, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let deployed = p.registry.deployed_model(&id).ok_or_else(|| ModelError::NotDeployed(id.clone()))?;
    Ok(Json(json!({
        "model_id": id,
        "deployed_ref": p.registry.deployed_ref(&id),
        "labels": deployed.labels,
        "feature_len": deployed.feature_len,
        "events": p.registry.events(&id),
    })))
}

#[derive(Debug, Deserialize)]
struct PredictQuery {
    features: String,
}

#[derive(Debug, Deserialize)]
struct PredictBody {
    features: Vec<f64>,
}

/// `?features=1.0,2.5,...`
async fn predict_get(
    State(p): AppState,
    Path(id): Path<String>,
    Query(q): Query<PredictQuery>,
) -> ApiResult<Json<Value>> {
    let features = q
        .features
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::bad_request(format!("features: {e}")))?;
    Ok(Json(json!(p.registry.predict(&id, &features)?)))
}

async fn predict_post(
    State(p): AppState,
    Path(id): Path<String>,
    Json(body): Json<PredictBody>,
) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.registry.predict(&id, &body.features)?)))
}

#[derive(Debug, Deserialize)]
struct DeployBody {
    weights_ref: String,
    #[serde(default = "yes")]
    approve: bool,
}

fn yes() -> bool {
    true
}

async fn deploy(State(p): AppState, Path(id): Path<String>, Json(body): Json<DeployBody>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.registry.deploy(&id, &body.weights_ref, body.approve)?)))
}

async fn trainer_status(State(p): AppState) -> Json<Value> {
    Json(json!(p.trainer.status()))
}

/// Grants the pending approval and runs a poll so training starts at once.
async fn trainer_approve(State(p): AppState) -> ApiResult<Json<Value>> {
    if !p.trainer.approve() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no training pending approval"));
    }
    let trainer = p.trainer.clone();
    let action = tokio::task::spawn_blocking(move || trainer.poll())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(json!({ "approved": true, "action": action, "status": p.trainer.status() })))
}

async fn trainer_poll(State(p): AppState) -> ApiResult<Json<Value>> {
    let trainer = p.trainer.clone();
    let action = tokio::task::spawn_blocking(move || trainer.poll())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(json!({ "action": action, "status": p.trainer.status() })))
}

async fn dataset(State(p): AppState, Path(version): Path<String>) -> ApiResult<Json<Dataset>> {
    Ok(Json(Dataset::load(p.registry.artifacts(), &version)?))
}
