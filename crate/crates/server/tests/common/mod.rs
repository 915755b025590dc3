#![allow(dead_code)]

use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use agentloom_core::store::SqliteStore;
use agentloom_server::{predict_router, router, serve, ServerConfig, WS_PROTOCOL};
use agentloom_core::schema::WorkflowSpec;
use serde_json::{json, Value};
use tungstenite::client::IntoClientRequest;
use tungstenite::stream::MaybeTlsStream;

pub struct TestServer {
    pub base: String,
    pub dir: tempfile::TempDir,
    pub store: Arc<SqliteStore>,
    rt: tokio::runtime::Runtime,
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

fn spawn(rt: &tokio::runtime::Runtime, app: axum::Router) -> String {
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(serve(listener, app, std::future::pending()));
    format!("127.0.0.1:{}", addr.port())
}

impl TestServer {
    pub fn start() -> Self {
        Self::with_config(ServerConfig::default())
    }

    pub fn with_config(config: ServerConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::in_dir(dir, config)
    }

    pub fn in_dir(dir: tempfile::TempDir, config: ServerConfig) -> Self {
        let store = Arc::new(SqliteStore::open_in(dir.path()).unwrap());
        let rt = runtime();
        let base = spawn(&rt, router(store.clone(), config));
        TestServer { base, dir, store, rt }
    }

    /// Stops the server and hands back its data directory.
    pub fn stop(self) -> tempfile::TempDir {
        self.rt.shutdown_timeout(Duration::from_secs(2));
        drop(self.store);
        self.dir
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = agent().get(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        let mut resp = agent().get(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut resp = agent().post(&self.url(path)).send_json(body).unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().with_config().limit(1 << 30).read_json().unwrap())
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let mut resp = agent()
            .post(&self.url(path))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }

    pub fn delete(&self, path: &str) -> (u16, Value) {
        let mut resp = agent().delete(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }

    /// Creates an entity and returns its id.
    pub fn create(&self, plural: &str, body: Value) -> String {
        let (status, v) = self.post(&format!("/api/{plural}"), body);
        assert_eq!(status, 201, "{v}");
        v["data"]["id"].as_str().unwrap().to_string()
    }

    pub fn subscribe(&self, session: &str) -> Ws {
        let url = format!("ws://{}/api/ws/sessions/{session}", self.base);
        let mut req = url.into_client_request().unwrap();
        req.headers_mut()
            .insert("Sec-WebSocket-Protocol", WS_PROTOCOL.parse().unwrap());
        let (ws, resp) = tungstenite::connect(req).unwrap();
        assert_eq!(
            resp.headers().get("sec-websocket-protocol").unwrap(),
            WS_PROTOCOL
        );
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        }
        Ws(ws)
    }
}

pub struct PredictServer {
    pub base: String,
    rt: tokio::runtime::Runtime,
}

impl PredictServer {
    pub fn start(spec: WorkflowSpec) -> Self {
        let rt = runtime();
        let base = spawn(&rt, predict_router(spec, ServerConfig::default()));
        PredictServer { base, rt }
    }

    pub fn predict(&self, task: &str) -> (u16, Value) {
        let mut resp = agent()
            .post(&format!("http://{}/predict", self.base))
            .send_json(json!({ "task": task }))
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap())
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub struct Ws(pub tungstenite::WebSocket<MaybeTlsStream<TcpStream>>);

pub enum Frame {
    Event(Value),
    Closed(Option<u16>),
}

impl Ws {
    pub fn next(&mut self) -> Frame {
        loop {
            match self.0.read() {
                Ok(tungstenite::Message::Text(t)) => return Frame::Event(serde_json::from_str(&t).unwrap()),
                Ok(tungstenite::Message::Close(c)) => return Frame::Closed(c.map(|c| u16::from(c.code))),
                Ok(_) => continue,
                Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => {
                    return Frame::Closed(None)
                }
                Err(e) => panic!("websocket error: {e}"),
            }
        }
    }

    /// Reads events through the first terminal one.
    pub fn until_terminal(&mut self) -> Vec<Value> {
        let mut out = Vec::new();
        loop {
            match self.next() {
                Frame::Event(e) => {
                    let done = matches!(e["kind"].as_str(), Some("run_finished" | "run_error"));
                    out.push(e);
                    if done {
                        return out;
                    }
                }
                Frame::Closed(code) => panic!("closed early with {code:?}"),
            }
        }
    }

    /// Reads events until one of `kind` arrives.
    pub fn until_kind(&mut self, kind: &str) -> Vec<Value> {
        let mut out = Vec::new();
        loop {
            match self.next() {
                Frame::Event(e) => {
                    let hit = e["kind"] == kind;
                    out.push(e);
                    if hit {
                        return out;
                    }
                }
                Frame::Closed(code) => panic!("closed early with {code:?}"),
            }
        }
    }

    pub fn send(&mut self, frame: Value) {
        self.0
            .send(tungstenite::Message::Text(frame.to_string().into()))
            .unwrap();
    }
}

/// Builds a two-agent workflow through the API and returns
/// `(workflow_id, session_id)`.
pub fn pair_workflow(srv: &TestServer, replies: &[&str], proxy_mode: &str, max_turns: u32) -> (String, String) {
    let steps: Vec<Value> = replies.iter().map(|r| json!({ "content": r })).collect();
    let model = srv.create(
        "models",
        json!({"name": "mock", "provider": "mock", "model_name": "mock-1",
               "pricing": {"prompt_per_1k": 0.01, "completion_per_1k": 0.02},
               "script": {"steps": steps}}),
    );
    let user = srv.create(
        "agents",
        json!({"type": "user_proxy", "name": "user", "human_input_mode": proxy_mode}),
    );
    let helper = srv.create(
        "agents",
        json!({"type": "assistant", "name": "helper", "model_ref": model, "system_message": "Be brief."}),
    );
    let workflow = srv.create(
        "workflows",
        json!({"name": "pair", "pattern": "autonomous_chat", "initiator_ref": user,
               "receiver_ref": helper, "termination": {"max_turns": max_turns}}),
    );
    let session = srv.create("sessions", json!({"workflow_ref": workflow, "name": "s"}));
    (workflow, session)
}

/// Drops fields that differ between otherwise identical runs.
pub fn normalize(mut v: Value) -> Value {
    fn walk(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for key in ["id", "session_ref", "created_at", "duration_s", "tool_call_id"] {
                    map.remove(key);
                }
                map.values_mut().for_each(walk);
            }
            Value::Array(items) => items.iter_mut().for_each(walk),
            _ => {}
        }
    }
    walk(&mut v);
    v
}
