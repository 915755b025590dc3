use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use serde::Deserialize;
use serde_json::json;

use agentloom_core::engine::{
    instantiate, CancelToken, EventBody, HumanInput, HumanInputRequest, HumanReply, RunContext, RunEvent,
    RunResult, RunStatus, RuntimeEnv,
};
use agentloom_core::profiler::{profile as compute_profile, ProfileReport};
use agentloom_core::schema::{validate, WorkflowSpec};
use agentloom_core::store::{resolve_workflow, EntityKind, Session, SessionStatus, StoreError};
use agentloom_core::tools::{classify_artifact, diff_snapshots, snapshot, MediaKind, Snapshot};

use crate::api::{self, parse_body, ApiError, TaskRequest};
use crate::{status_only, Inbound, RunControl, SessionBus, SharedState};

/// Human replies arriving over the WebSocket or the input route.
struct ChannelInput {
    rx: Mutex<mpsc::Receiver<Inbound>>,
    cancel: CancelToken,
    timeout: Duration,
}

const POLL: Duration = Duration::from_millis(100);

impl HumanInput for ChannelInput {
    fn interactive(&self) -> bool {
        true
    }

    fn request(&self, _: &HumanInputRequest) -> HumanReply {
        let deadline = Instant::now() + self.timeout;
        let rx = self.rx.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if self.cancel.is_cancelled() {
                return HumanReply::Cancelled;
            }
            let now = Instant::now();
            if now >= deadline {
                return HumanReply::Pending;
            }
            match rx.recv_timeout(POLL.min(deadline - now)) {
                Ok(Inbound::Text(t)) => return HumanReply::Text(t),
                Ok(Inbound::Cancel) => return HumanReply::Cancelled,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => return HumanReply::Pending,
            }
        }
    }
}

fn load_session(st: &SharedState, id: &str) -> Result<Session, ApiError> {
    match st.store.get(EntityKind::Session, id)?.payload {
        agentloom_core::store::Payload::Session(s) => Ok(s),
        _ => unreachable!("session rows hold sessions"),
    }
}

fn session_workflow(st: &SharedState, session: &Session) -> Result<WorkflowSpec, ApiError> {
    resolve_workflow(st.store.as_ref(), &session.workflow_ref).map_err(|e| match e {
        StoreError::NotFound { kind, id } => ApiError::not_found(format!(
            "{kind} `{id}` used by session `{}` no longer exists",
            session.id
        ))
        .with_data(json!({"kind": kind, "id": id})),
        other => other.into(),
    })
}

/// Marks the session finished even if the run panics.
struct RunGuard {
    st: SharedState,
    bus: Arc<SessionBus>,
    session_id: String,
    status: SessionStatus,
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        *self.bus.control.lock().unwrap_or_else(|p| p.into_inner()) = None;
        if let Err(e) = self.st.store.end_run(&self.session_id, self.status) {
            tracing::warn!(session = %self.session_id, error = %e, "could not record the end of a run");
        }
    }
}

pub(crate) async fn run(State(st): State<SharedState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let task = TaskRequest::parse(&body)?;
    let session = load_session(&st, &id)?;
    let spec = session_workflow(&st, &session)?;
    let report = validate(&spec);
    if !report.ok {
        return Err(StoreError::Invalid {
            kind: EntityKind::Workflow,
            report,
        }
        .into());
    }
    st.store.begin_run(&id)?;

    let bus = st.bus(&id);
    let (tx, rx) = mpsc::channel();
    let cancel = CancelToken::new();
    *bus.control.lock().unwrap_or_else(|p| p.into_inner()) = Some(RunControl {
        input: tx,
        cancel: cancel.clone(),
    });
    let guard = RunGuard {
        st: st.clone(),
        bus: bus.clone(),
        session_id: id.clone(),
        status: SessionStatus::Idle,
    };
    let input = ChannelInput {
        rx: Mutex::new(rx),
        cancel: cancel.clone(),
        timeout: st.config.human_input_timeout,
    };
    let outcome = tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let result = execute(&guard.st, &guard.bus, &session, &spec, &task, &input, cancel);
        if matches!(&result, Ok(r) if r.status == RunStatus::AwaitingHuman) {
            guard.status = SessionStatus::AwaitingHuman;
        }
        result
    })
    .await
    .map_err(|e| ApiError::internal(format!("run aborted: {e}")))?;
    Ok(api::ok(outcome?))
}

fn execute(
    st: &SharedState,
    bus: &SessionBus,
    session: &Session,
    spec: &WorkflowSpec,
    task: &str,
    input: &ChannelInput,
    cancel: CancelToken,
) -> Result<RunResult, ApiError> {
    let history = st.store.load_history(&session.id)?;
    let cfg = &st.config;
    let env = RuntimeEnv::new(&session.workdir)
        .with_session(&session.id)
        .with_env(cfg.env.clone())
        .with_pricing(cfg.pricing.clone())
        .with_sandbox(cfg.sandbox.clone());
    let sink = |event: &RunEvent| {
        if let EventBody::Message(m) = &event.body {
            if let Err(e) = st.store.append_message(&session.id, m) {
                tracing::error!(session = %session.id, error = %e, "could not persist a message");
            }
        }
        bus.publish(event);
    };
    let inst = match instantiate(spec, env) {
        Ok(inst) => inst,
        Err(e) => {
            sink(&RunEvent {
                sequence: 0,
                body: EventBody::RunError {
                    code: "instantiation_error".into(),
                    message: e.to_string(),
                },
            });
            return Err(e.into());
        }
    };
    let ctx = RunContext::new(&sink).with_input(input).with_cancel(cancel);
    Ok(inst.execute(task, &history, &ctx)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputRequest {
    content: String,
}

fn no_live_run(id: &str) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "conflict", format!("session `{id}` has no run in progress"))
}

pub(crate) async fn input(State(st): State<SharedState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: InputRequest = parse_body(&body)?;
    load_session(&st, &id)?;
    if st.bus(&id).deliver(Inbound::Text(req.content)) {
        Ok(status_only(StatusCode::ACCEPTED, json!({"delivered": true})))
    } else {
        Err(no_live_run(&id))
    }
}

pub(crate) async fn cancel(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    load_session(&st, &id)?;
    if st.bus(&id).deliver(Inbound::Cancel) {
        Ok(status_only(StatusCode::ACCEPTED, json!({"cancelled": true})))
    } else {
        Err(no_live_run(&id))
    }
}

pub(crate) async fn messages(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(api::ok(st.store.load_history(&id)?))
}

/// The profile of a session's persisted history.
pub(crate) fn session_profile(st: &SharedState, id: &str) -> Result<ProfileReport, ApiError> {
    let session = load_session(st, id)?;
    let history = st.store.load_history(id)?;
    let pricing = match resolve_workflow(st.store.as_ref(), &session.workflow_ref) {
        Ok(spec) => st.config.pricing.with_models(&spec.models),
        Err(_) => st.config.pricing.clone(),
    };
    Ok(compute_profile(&history, &pricing))
}

pub(crate) async fn profile(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(api::ok(session_profile(&st, &id)?))
}

pub(crate) async fn files(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = load_session(&st, &id)?;
    let files = diff_snapshots(&Snapshot::new(), &snapshot(FsPath::new(&session.workdir)));
    Ok(api::ok(files))
}

/// `rel` resolved inside `root`, refusing anything that leaves it.
fn confined(root: &FsPath, rel: &str) -> Option<PathBuf> {
    let rel = FsPath::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let root = root.canonicalize().ok()?;
    let path = root.join(rel).canonicalize().ok()?;
    path.starts_with(&root).then_some(path)
}

fn content_type(path: &FsPath) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "svg" => "image/svg+xml",
        "webp" => "image/webp",
        "pdf" => "application/pdf",
        "json" => "application/json",
        "html" | "htm" => "text/html; charset=utf-8",
        "csv" => "text/csv; charset=utf-8",
        "md" => "text/markdown; charset=utf-8",
        _ => match classify_artifact(path) {
            MediaKind::Code | MediaKind::Document | MediaKind::Data => "text/plain; charset=utf-8",
            _ => "application/octet-stream",
        },
    }
}

pub(crate) async fn file(
    State(st): State<SharedState>,
    Path((id, rel)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let session = load_session(&st, &id)?;
    let path = confined(FsPath::new(&session.workdir), &rel)
        .filter(|p| p.is_file())
        .ok_or_else(|| ApiError::not_found(format!("file `{rel}` not found in session `{id}`")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::internal(format!("cannot read `{rel}`: {e}")))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}
