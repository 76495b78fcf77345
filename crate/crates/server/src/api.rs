//! JSON-over-HTTP surface. Pipeline calls are blocking (external providers use
//! a blocking client), so every handler hops onto the blocking pool.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use pqa_core::eval::EvalReport;
use pqa_core::exec::Execution;
use pqa_core::ingest::{run_eval_job, IngestError, IngestReport};
use pqa_core::model::{ProductId, Session, UserContext};
use pqa_core::pipeline::{Pipeline, PipelineError, TurnTrace};
use pqa_core::store::StoreError;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl ToString) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.to_string(),
                details: Vec::new(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Store(StoreError::UnknownSession(_)) => StatusCode::NOT_FOUND,
            PipelineError::EmptyQuery | PipelineError::UnknownProduct(_) => StatusCode::BAD_REQUEST,
            PipelineError::Store(StoreError::Session(_)) => StatusCode::CONFLICT,
            PipelineError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => ApiError::new(StatusCode::BAD_REQUEST, e),
            IngestError::Schema(lines) => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody {
                    error: format!("{} bad judgment line(s)", lines.len()),
                    details: lines.iter().map(|l| l.to_string()).collect(),
                },
            },
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub exec: Execution,
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub user_context: UserContext,
    #[serde(default)]
    pub page_product_id: Option<ProductId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub query: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub judgments_path: PathBuf,
    #[serde(default = "yes")]
    pub group_by_intent: bool,
}

fn yes() -> bool {
    true
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(
    State(s): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(req) = body?;
    let session = blocking(move || {
        Ok(s.pipeline
            .create_session(req.user_context, req.page_product_id)?)
    })
    .await?;
    Ok((
        StatusCode::CREATED,
        Json(Created {
            session_id: session.session_id,
        }),
    ))
}

async fn post_turn(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<TurnTrace>, ApiError> {
    let Json(req) = body?;
    blocking(move || Ok(s.pipeline.handle_turn(&id, &req.query)?))
        .await
        .map(Json)
}

async fn get_session(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<Session>, ApiError> {
    blocking(move || Ok(s.pipeline.session(&id)?))
        .await
        .map(Json)
}

async fn ingest(
    State(s): State<AppState>,
    body: Result<Json<IngestRequest>, JsonRejection>,
) -> Result<Json<IngestReport>, ApiError> {
    let Json(req) = body?;
    blocking(move || Ok(s.pipeline.ingest_path(&req.path)?))
        .await
        .map(Json)
}

async fn run_eval(
    State(s): State<AppState>,
    body: Result<Json<EvalRequest>, JsonRejection>,
) -> Result<Json<EvalReport>, ApiError> {
    let Json(req) = body?;
    blocking(move || {
        Ok(run_eval_job(
            &req.judgments_path,
            req.group_by_intent,
            s.exec,
        )?)
    })
    .await
    .map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/catalog/ingest", post(ingest))
        .route("/v1/eval/run", post(run_eval))
        .layer(CorsLayer::permissive())
        .with_state(state)
}
