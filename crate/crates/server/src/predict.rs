use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::json;

use agentloom_core::engine::{instantiate, NullSink, RunContext, RunResult, RuntimeEnv};
use agentloom_core::schema::WorkflowSpec;
use agentloom_core::tools::SCRATCH_DIR;

use crate::api::{self, ApiError, TaskRequest};
use crate::ServerConfig;

/// Response data of `POST /predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// The ephemeral session the request ran in.
    pub session_id: String,
    #[serde(flatten)]
    pub result: RunResult,
}

struct Deployed {
    spec: WorkflowSpec,
    config: ServerConfig,
}

/// Serves one workflow: `POST /predict {task}` runs it in a fresh
/// ephemeral session, `GET /health` and `GET /workflow` describe it.
/// Callers validate `spec` first.
pub fn predict_router(spec: WorkflowSpec, config: ServerConfig) -> Router {
    let state = Arc::new(Deployed { spec, config });
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(|| async { api::ok(json!({"healthy": true})) }))
        .route("/workflow", get(workflow))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

async fn workflow(State(d): State<Arc<Deployed>>) -> Response {
    api::ok(&d.spec)
}

async fn predict(State(d): State<Arc<Deployed>>, body: Bytes) -> Result<Response, ApiError> {
    let task = TaskRequest::parse(&body)?;
    let result = tokio::task::spawn_blocking(move || run_once(&d, &task))
        .await
        .map_err(|e| ApiError::internal(format!("run aborted: {e}")))??;
    Ok(api::ok(result))
}

fn run_once(d: &Deployed, task: &str) -> Result<PredictResponse, ApiError> {
    let dir = tempfile::Builder::new()
        .prefix("agentloom-predict-")
        .tempdir()
        .map_err(|e| ApiError::internal(format!("cannot create a session directory: {e}")))?;
    let session_id = uuid::Uuid::new_v4().to_string();
    let env = RuntimeEnv::new(dir.path().join(SCRATCH_DIR))
        .with_session(&session_id)
        .with_env(d.config.env.clone())
        .with_pricing(d.config.pricing.clone())
        .with_sandbox(d.config.sandbox.clone());
    let inst = instantiate(&d.spec, env)?;
    let result = inst.execute(task, &[], &RunContext::new(&NullSink))?;
    Ok(PredictResponse { session_id, result })
}
