use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{HumanInputRequest, Message, RunStatus};
use crate::tools::{ArtifactRef, ToolResult};

/// One streamed occurrence in a run. Serializes as
/// `{"sequence": n, "kind": "...", "payload": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    /// Strictly increasing within a run, starting at 0.
    pub sequence: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Message(Message),
    ToolStarted(ToolStarted),
    ToolFinished(ToolFinished),
    Artifact(ArtifactEvent),
    HumanInputRequested(HumanInputRequest),
    RunFinished { status: RunStatus, turns: u32 },
    RunError { code: String, message: String },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Message(_) => "message",
            EventBody::ToolStarted(_) => "tool_started",
            EventBody::ToolFinished(_) => "tool_finished",
            EventBody::Artifact(_) => "artifact",
            EventBody::HumanInputRequested(_) => "human_input_requested",
            EventBody::RunFinished { .. } => "run_finished",
            EventBody::RunError { .. } => "run_error",
        }
    }

    /// `run_finished` and `run_error` end a run.
    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::RunFinished { .. } | EventBody::RunError { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStarted {
    pub call_id: String,
    pub agent: String,
    pub tool: String,
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolFinished {
    pub call_id: String,
    pub agent: String,
    pub tool: String,
    pub result: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEvent {
    pub call_id: String,
    pub agent: String,
    pub artifact: ArtifactRef,
}

/// Receives the events of a run, in order, on the running thread.
pub trait EventSink: Send + Sync {
    fn emit(&self, event: &RunEvent);
}

impl<F> EventSink for F
where
    F: Fn(&RunEvent) + Send + Sync,
{
    fn emit(&self, event: &RunEvent) {
        self(event)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: &RunEvent) {}
}

/// Collects every event in memory.
#[derive(Debug, Default)]
pub struct EventLog(Mutex<Vec<RunEvent>>);

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<RunEvent> {
        self.0.lock().unwrap().clone()
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.0.lock().unwrap().iter().map(|e| e.body.kind()).collect()
    }
}

impl EventSink for EventLog {
    fn emit(&self, event: &RunEvent) {
        self.0.lock().unwrap().push(event.clone());
    }
}
