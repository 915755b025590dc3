//! HTTP and WebSocket API over an agentloom store.
//!
//! Every JSON response is wrapped in an [`Envelope`]. Entity routes live
//! under `/api/{models,skills,memories,agents,workflows,sessions}`:
//!
//! - `GET /api/{kind}` lists (newest first; `?tag=` and, for sessions,
//!   `?workflow_ref=` filter);
//! - `POST /api/{kind}` creates (201) or, when the body carries an `id`,
//!   updates (200);
//! - `GET /api/{kind}/{id}` and `DELETE /api/{kind}/{id}?force=true`.
//!
//! Session control:
//!
//! - `POST /api/sessions/{id}/run {task}` runs to completion and returns the
//!   `RunResult`;
//! - `POST /api/sessions/{id}/input {content}` and `POST .../cancel` steer a
//!   live run;
//! - `GET /api/sessions/{id}/messages`, `.../profile`, `.../files` and
//!   `.../files/{path}`;
//! - `WS /api/ws/sessions/{id}` (subprotocol `agentloom.v1`) streams one
//!   JSON `RunEvent` per text frame and accepts `{"kind":"human_input",
//!   "content":...}` and `{"kind":"cancel"}`.
//!
//! Documents: `GET /api/workflows/{id}/export`, `GET
//! /api/gallery/{kind}/{id}/export`, `POST /api/gallery/import` and `POST
//! /api/validate`.
//!
//! [`predict_router`] serves a single workflow under `POST /predict`.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::Router;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::broadcast;

use agentloom_core::backend::{process_env, EnvLookup};
use agentloom_core::engine::{CancelToken, RunEvent};
use agentloom_core::store::{EntityKind, ListFilter, Payload, Store};
use agentloom_core::tools::Sandbox;
use agentloom_core::PricingTable;

mod api;
mod documents;
mod predict;
mod runs;
mod ws;

pub use api::{ApiError, Envelope, EnvelopeStatus};
pub use predict::{predict_router, PredictResponse};

/// WebSocket subprotocol for event streams.
pub const WS_PROTOCOL: &str = "agentloom.v1";
/// Close code sent to a subscriber that fell more than [`EVENT_BUFFER`]
/// frames behind.
pub const CLOSE_OVERFLOW: u16 = 4008;
/// Close code for a subscription to an unknown session.
pub const CLOSE_PROTOCOL_ERROR: u16 = 1002;
/// Frames buffered per subscriber.
pub const EVENT_BUFFER: usize = 1024;
/// How long a run waits for a human reply before ending as
/// `awaiting_human`.
pub const DEFAULT_HUMAN_INPUT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone)]
pub struct ServerConfig {
    pub pricing: PricingTable,
    /// Built frontend bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    pub sandbox: Sandbox,
    /// Where model credentials are read from.
    pub env: EnvLookup,
    pub human_input_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            pricing: PricingTable::default(),
            static_dir: None,
            sandbox: Sandbox::default(),
            env: process_env(),
            human_input_timeout: DEFAULT_HUMAN_INPUT_TIMEOUT,
        }
    }
}

pub(crate) enum Inbound {
    Text(String),
    Cancel,
}

/// Handles on the run currently executing in a session.
pub(crate) struct RunControl {
    pub input: mpsc::Sender<Inbound>,
    pub cancel: CancelToken,
}

/// Per-session event fan-out.
pub(crate) struct SessionBus {
    pub events: broadcast::Sender<Arc<str>>,
    pub control: Mutex<Option<RunControl>>,
}

impl SessionBus {
    fn new() -> Self {
        SessionBus {
            events: broadcast::channel(EVENT_BUFFER).0,
            control: Mutex::new(None),
        }
    }

    pub fn publish(&self, event: &RunEvent) {
        let frame: Arc<str> = serde_json::to_string(event).expect("events serialize").into();
        // no subscribers is fine
        let _ = self.events.send(frame);
    }

    /// Delivers an inbound frame to the live run. False when there is none.
    pub fn deliver(&self, inbound: Inbound) -> bool {
        let control = self.control.lock().unwrap_or_else(|p| p.into_inner());
        match control.as_ref() {
            Some(c) => {
                if matches!(inbound, Inbound::Cancel) {
                    c.cancel.cancel();
                }
                c.input.send(inbound).is_ok()
            }
            None => false,
        }
    }
}

pub(crate) struct AppState {
    pub store: Arc<dyn Store>,
    pub config: ServerConfig,
    buses: Mutex<HashMap<String, Arc<SessionBus>>>,
}

pub(crate) type SharedState = Arc<AppState>;

impl AppState {
    pub fn bus(&self, session_id: &str) -> Arc<SessionBus> {
        let mut buses = self.buses.lock().unwrap_or_else(|p| p.into_inner());
        buses
            .entry(session_id.to_string())
            .or_insert_with(|| Arc::new(SessionBus::new()))
            .clone()
    }

    fn drop_bus(&self, session_id: &str) {
        let mut buses = self.buses.lock().unwrap_or_else(|p| p.into_inner());
        buses.remove(session_id);
    }
}

/// The full studio API over `store`.
pub fn router(store: Arc<dyn Store>, config: ServerConfig) -> Router {
    let static_dir = config.static_dir.clone();
    let state: SharedState = Arc::new(AppState {
        store,
        config,
        buses: Mutex::new(HashMap::new()),
    });
    let mut app = Router::new()
        .route("/api/health", get(|| async { api::ok(json!({"healthy": true})) }))
        .route("/api/sessions/{id}/run", post(runs::run))
        .route("/api/sessions/{id}/input", post(runs::input))
        .route("/api/sessions/{id}/cancel", post(runs::cancel))
        .route("/api/sessions/{id}/messages", get(runs::messages))
        .route("/api/sessions/{id}/profile", get(runs::profile))
        .route("/api/sessions/{id}/files", get(runs::files))
        .route("/api/sessions/{id}/files/{*path}", get(runs::file))
        .route("/api/ws/sessions/{id}", get(ws::subscribe))
        .route("/api/workflows/{id}/export", get(documents::export_workflow))
        .route("/api/gallery/{kind}/{id}/export", get(documents::export_gallery))
        .route("/api/gallery/import", post(documents::import_gallery))
        .route("/api/validate", post(documents::validate));
    for kind in EntityKind::ALL {
        let base = format!("/api/{}", kind.plural());
        app = app
            .route(
                &base,
                get(move |st: State<SharedState>, q: Query<ListQuery>| list(st, kind, q))
                    .post(move |st: State<SharedState>, body: Bytes| upsert(st, kind, body)),
            )
            .route(
                &format!("{base}/{{id}}"),
                get(move |st: State<SharedState>, id: Path<String>| fetch(st, kind, id)).delete(
                    move |st: State<SharedState>, id: Path<String>, q: Query<DeleteQuery>| remove(st, kind, id, q),
                ),
            );
    }
    app = app.route("/api/{*rest}", any(unknown_route));
    let app = match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(tower_http::services::ServeDir::new(dir).fallback(tower_http::services::ServeFile::new(index)))
        }
        None => app.fallback(get(placeholder_page)),
    };
    app.with_state(state)
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

async fn unknown_route() -> ApiError {
    ApiError::not_found("no such API route")
}

async fn placeholder_page() -> Response {
    Html(
        "<!doctype html><title>agentloom</title><h1>agentloom</h1>\
         <p>The API is available under <code>/api</code>. No frontend bundle is installed.</p>",
    )
    .into_response()
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    tag: Option<String>,
    workflow_ref: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct DeleteQuery {
    #[serde(default)]
    force: bool,
}

async fn list(State(st): State<SharedState>, kind: EntityKind, Query(q): Query<ListQuery>) -> Result<Response, ApiError> {
    let filter = ListFilter {
        tag: q.tag,
        workflow_ref: q.workflow_ref,
    };
    Ok(api::ok(st.store.list(kind, &filter)?))
}

async fn fetch(State(st): State<SharedState>, kind: EntityKind, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(api::ok(st.store.get(kind, &id)?))
}

async fn upsert(State(st): State<SharedState>, kind: EntityKind, body: Bytes) -> Result<Response, ApiError> {
    let mut obj: Map<String, Value> = api::parse_body(&body)?;
    let tags = match obj.remove("tags") {
        None | Some(Value::Null) => None,
        Some(v) => Some(api::parse_body::<Vec<String>>(v.to_string().as_bytes())?),
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        _ => None,
    };
    let payload = Payload::from_json(kind, Value::Object(obj))?;
    match id {
        Some(id) => Ok(api::ok(st.store.update(&id, payload, tags)?)),
        None => Ok(api::created(st.store.create(payload, tags.unwrap_or_default())?)),
    }
}

async fn remove(
    State(st): State<SharedState>,
    kind: EntityKind,
    Path(id): Path<String>,
    Query(q): Query<DeleteQuery>,
) -> Result<Response, ApiError> {
    let deleted = st.store.delete(kind, &id, q.force)?;
    for r in deleted.iter().filter(|r| r.kind == EntityKind::Session) {
        st.drop_bus(&r.id);
    }
    Ok(api::ok(json!({"deleted": deleted})))
}

pub(crate) fn status_only(status: StatusCode, data: Value) -> Response {
    (status, axum::Json(Envelope::ok(data))).into_response()
}

// The server chapter of the book runs as doctests of this crate.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/server.md")]
mod book_server {}
