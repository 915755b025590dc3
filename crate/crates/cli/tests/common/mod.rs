#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    fixture(&format!("golden/{name}.json"))
}

/// The CLI with a clean environment: no user config, no settings variables.
pub struct Cli {
    home: tempfile::TempDir,
}

impl Cli {
    pub fn new() -> Self {
        Cli {
            home: tempfile::tempdir().unwrap(),
        }
    }

    pub fn home(&self) -> &Path {
        self.home.path()
    }

    pub fn command(&self) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_agentloom"));
        cmd.env("HOME", self.home.path())
            .env("XDG_CONFIG_HOME", self.home.path().join("config"))
            .env("XDG_DATA_HOME", self.home.path().join("data"))
            .env_remove("AGENTLOOM_DB")
            .env_remove("AGENTLOOM_PRICING")
            .env_remove("AGENTLOOM_CONFIG")
            .env_remove("RUST_LOG");
        cmd
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.command().args(args).stdin(Stdio::null()).output().unwrap()
    }

    /// Starts a long-running command that prints its URL on the first
    /// stdout line.
    pub fn spawn_server(&self, args: &[&str]) -> Served {
        let mut child = self
            .command()
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let start = line.find("http://").unwrap_or_else(|| panic!("no URL in {line:?}"));
        let url = line[start..].trim().trim_end_matches("/predict").to_string();
        Served { child, url }
    }
}

pub struct Served {
    pub child: Child,
    pub url: String,
}

impl Served {
    /// Sends SIGTERM and returns the exit status.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status()
            .unwrap();
        self.child.wait().unwrap()
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub fn get(url: &str) -> (u16, Value) {
    let mut resp = agent().get(url).call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap())
}

pub fn post(url: &str, body: Value) -> (u16, Value) {
    let mut resp = agent().post(url).send_json(body).unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().with_config().limit(1 << 30).read_json().unwrap())
}

pub fn delete(url: &str) -> (u16, Value) {
    let mut resp = agent().delete(url).call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap())
}

/// Drops fields that differ between otherwise identical runs.
pub fn normalize(mut v: Value) -> Value {
    fn walk(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for key in ["id", "session_ref", "session_id", "created_at", "duration_s", "tool_call_id", "call_id"] {
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

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The API router on an ephemeral port inside this process.
pub struct InProcess {
    pub base: String,
    pub store: std::sync::Arc<agentloom_core::store::SqliteStore>,
    rt: tokio::runtime::Runtime,
}

impl InProcess {
    pub fn start(dir: &Path, config: agentloom_server::ServerConfig) -> Self {
        let store = std::sync::Arc::new(agentloom_core::store::SqliteStore::open_in(dir).unwrap());
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("127.0.0.1:{}", listener.local_addr().unwrap().port());
        let app = agentloom_server::router(store.clone(), config);
        rt.spawn(agentloom_server::serve(listener, app, std::future::pending()));
        InProcess { base, store, rt }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.base)
    }

    pub fn subscribe(&self, session: &str) -> Ws {
        use tungstenite::client::IntoClientRequest;
        let url = format!("ws://{}/api/ws/sessions/{session}", self.base);
        let mut req = url.into_client_request().unwrap();
        req.headers_mut().insert(
            "Sec-WebSocket-Protocol",
            agentloom_server::WS_PROTOCOL.parse().unwrap(),
        );
        let (ws, _) = tungstenite::connect(req).unwrap();
        if let tungstenite::stream::MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(std::time::Duration::from_secs(20))).unwrap();
        }
        Ws(ws)
    }

    pub fn stop(self) {
        self.rt.shutdown_timeout(std::time::Duration::from_secs(2));
    }
}

pub struct Ws(pub tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>);

impl Ws {
    /// Reads events through the first terminal one.
    pub fn until_terminal(&mut self) -> Vec<Value> {
        let mut out = Vec::new();
        loop {
            match self.0.read().unwrap() {
                tungstenite::Message::Text(t) => {
                    let e: Value = serde_json::from_str(&t).unwrap();
                    let done = matches!(e["kind"].as_str(), Some("run_finished" | "run_error"));
                    out.push(e);
                    if done {
                        return out;
                    }
                }
                tungstenite::Message::Close(c) => panic!("closed early: {c:?}"),
                _ => {}
            }
        }
    }
}
