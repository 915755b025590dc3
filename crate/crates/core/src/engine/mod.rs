//! The workflow manager.
//!
//! [`instantiate`] turns a validated [`WorkflowSpec`] into a
//! [`WorkflowInstance`] whose agents are bound to model backends, skills and
//! memory. [`WorkflowInstance::run`] drives an autonomous chat and
//! [`WorkflowInstance::run_sequential`] a sequential chat; both stream
//! [`RunEvent`]s to an [`EventSink`] as they go.
//!
//! Turn accounting: a *turn* is one model completion by any agent. Tool
//! executions, automatic proxy replies and human input do not count. A run
//! stops when a completion (or a human reply) contains the termination
//! keyword, or when the number of completions reaches `max_turns`; the
//! keyword is checked first.

mod context;
mod events;
mod memory;
mod runner;
mod speaker;
mod summary;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    process_env, ChatBackend, EnvLookup, MockBackend, OpenAiBackend, RetryPolicy, ToolCall, Usage,
};
use crate::profiler::{PricingTable, ProfileReport};
use crate::schema::{
    validate, AgentSpec, MemoryKind, Pattern, Provider, ValidationReport, WorkflowSpec,
};
use crate::tools::{Sandbox, SkillRegistry, ToolResult, ToolRuntime};

pub use events::{
    ArtifactEvent, EventBody, EventLog, EventSink, NullSink, RunEvent, ToolFinished, ToolStarted,
};
pub use memory::RecencyStore;
pub use speaker::round_robin_index;
pub use summary::{summarize, SUMMARY_CHAR_LIMIT};

/// Reply sent by a model-less agent that has nothing else to say.
pub const DEFAULT_AUTO_REPLY: &str = "Continue.";
pub const DEFAULT_CODE_TIMEOUT_S: f64 = 60.0;
/// Estimated-token budget for one request before old messages are dropped.
pub const DEFAULT_MAX_CONTEXT_TOKENS: u64 = 96_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    User,
    Assistant,
    Tool,
}

/// One conversational turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub session_ref: String,
    pub sender: String,
    pub recipient: String,
    pub role: MessageRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_result_ref: Option<ToolResult>,
    /// Present on every model-produced message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// `model_name` of the model that produced the message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub created_at: DateTime<Utc>,
    pub turn_index: u64,
}

impl Message {
    /// A plain message with a fresh id, stamped now, at turn index 0.
    pub fn new(sender: impl Into<String>, recipient: impl Into<String>, role: MessageRole, content: impl Into<String>) -> Self {
        Message {
            id: uuid::Uuid::new_v4().to_string(),
            session_ref: String::new(),
            sender: sender.into(),
            recipient: recipient.into(),
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
            tool_result_ref: None,
            usage: None,
            model: None,
            created_at: Utc::now(),
            turn_index: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    TerminatedKeyword,
    MaxTurnsReached,
    Error,
    AwaitingHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub final_message: Message,
    pub transcript: Vec<Message>,
    pub profile: ProfileReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanInputRequest {
    pub agent: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HumanReply {
    Text(String),
    /// Nobody can answer now; the run stops with `awaiting_human` and can be
    /// resumed by starting a new run on the same session.
    Pending,
    Cancelled,
}

/// Supplies human input to runs with `human_input_mode` other than `never`.
pub trait HumanInput: Send + Sync {
    /// Non-interactive sources make `always`/`on_termination` behave like
    /// `never`.
    fn interactive(&self) -> bool;
    fn request(&self, request: &HumanInputRequest) -> HumanReply;
}

/// Used by the CLI and serve mode.
#[derive(Debug, Default, Clone, Copy)]
pub struct NonInteractive;

impl HumanInput for NonInteractive {
    fn interactive(&self) -> bool {
        false
    }
    fn request(&self, _: &HumanInputRequest) -> HumanReply {
        HumanReply::Pending
    }
}

/// Answers from a fixed queue, then reports `Pending`. Handy in tests.
#[derive(Debug, Default)]
pub struct ScriptedInput {
    replies: Mutex<std::collections::VecDeque<String>>,
    requests: Mutex<Vec<HumanInputRequest>>,
}

impl ScriptedInput {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedInput {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<HumanInputRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl HumanInput for ScriptedInput {
    fn interactive(&self) -> bool {
        true
    }
    fn request(&self, request: &HumanInputRequest) -> HumanReply {
        self.requests.lock().unwrap().push(request.clone());
        match self.replies.lock().unwrap().pop_front() {
            Some(text) => HumanReply::Text(text),
            None => HumanReply::Pending,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Where a run sends its events and gets human input from.
pub struct RunContext<'a> {
    pub sink: &'a dyn EventSink,
    pub input: &'a dyn HumanInput,
    pub cancel: CancelToken,
}

impl<'a> RunContext<'a> {
    /// Non-interactive context with a fresh cancel token.
    pub fn new(sink: &'a dyn EventSink) -> Self {
        RunContext {
            sink,
            input: &NonInteractive,
            cancel: CancelToken::new(),
        }
    }

    pub fn with_input(mut self, input: &'a dyn HumanInput) -> Self {
        self.input = input;
        self
    }

    pub fn with_cancel(mut self, cancel: CancelToken) -> Self {
        self.cancel = cancel;
        self
    }
}

/// Everything an instance needs from its surroundings.
#[derive(Clone)]
pub struct RuntimeEnv {
    pub workdir: PathBuf,
    pub session_ref: String,
    pub env: EnvLookup,
    pub sandbox: Sandbox,
    pub pricing: PricingTable,
    pub retry: RetryPolicy,
    pub code_timeout_s: f64,
    pub max_context_tokens: u64,
}

impl RuntimeEnv {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        RuntimeEnv {
            workdir: workdir.into(),
            session_ref: uuid::Uuid::new_v4().to_string(),
            env: process_env(),
            sandbox: Sandbox::default(),
            pricing: PricingTable::default(),
            retry: RetryPolicy::default(),
            code_timeout_s: DEFAULT_CODE_TIMEOUT_S,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
        }
    }

    pub fn with_session(mut self, session_ref: impl Into<String>) -> Self {
        self.session_ref = session_ref.into();
        self
    }

    pub fn with_env(mut self, env: EnvLookup) -> Self {
        self.env = env;
        self
    }

    pub fn with_pricing(mut self, pricing: PricingTable) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn with_sandbox(mut self, sandbox: Sandbox) -> Self {
        self.sandbox = sandbox;
        self
    }
}

#[derive(Debug, Error)]
pub enum InstantiateError {
    #[error("workflow is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("model `{model_id}`: environment variable `{var}` is not set")]
    MissingCredential { model_id: String, var: String },
    #[error("cannot create session workdir {path}: {source}")]
    Workdir {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl InstantiateError {
    /// Id of the entity the error is about, when there is one.
    pub fn entity_id(&self) -> Option<&str> {
        match self {
            InstantiateError::MissingCredential { model_id, .. } => Some(model_id),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("task must not be empty")]
    EmptyTask,
    #[error("workflow pattern is {found:?}, expected {expected:?}")]
    PatternMismatch { expected: Pattern, found: Pattern },
    #[error("cannot summarize an empty transcript")]
    EmptyTranscript,
    #[error("unknown group chat `{0}`")]
    UnknownGroup(String),
}

/// A workflow with agents bound to backends, skills and memory.
pub struct WorkflowInstance {
    spec: WorkflowSpec,
    agents: BTreeMap<String, AgentSpec>,
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    mocks: BTreeMap<String, Arc<MockBackend>>,
    tools: ToolRuntime,
    memories: BTreeMap<String, Mutex<RecencyStore>>,
    env: RuntimeEnv,
}

impl std::fmt::Debug for WorkflowInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkflowInstance")
            .field("workflow", &self.spec.workflow.id)
            .field("agents", &self.agents.keys().collect::<Vec<_>>())
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Binds every agent the workflow uses. Fails unless the spec validates and
/// every referenced model backend can be constructed.
pub fn instantiate(spec: &WorkflowSpec, env: RuntimeEnv) -> Result<WorkflowInstance, InstantiateError> {
    let report = validate(spec);
    if !report.ok {
        return Err(InstantiateError::Invalid(report));
    }

    let mut used: Vec<&AgentSpec> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut queue: Vec<&str> = spec.workflow.agent_refs();
    queue.reverse();
    while let Some(id) = queue.pop() {
        if !seen.insert(id) {
            continue;
        }
        let agent = spec.agent(id).expect("validated reference");
        used.push(agent);
        for member in agent.members.iter().rev() {
            queue.push(member);
        }
    }

    let mut backends: BTreeMap<String, Arc<dyn ChatBackend>> = BTreeMap::new();
    let mut mocks = BTreeMap::new();
    let mut registry = SkillRegistry::new();
    let mut memories = BTreeMap::new();
    for agent in &used {
        if let Some(model_id) = &agent.model_ref {
            if !backends.contains_key(model_id) {
                let model = spec.model(model_id).expect("validated reference");
                let backend: Arc<dyn ChatBackend> = match model.provider {
                    Provider::Mock => {
                        let script = model.script.clone().expect("validated mock script");
                        let mock = Arc::new(MockBackend::new(script));
                        mocks.insert(model_id.clone(), mock.clone());
                        mock
                    }
                    Provider::OpenaiCompatible => {
                        if let Some(var) = &model.api_key_ref {
                            if (env.env)(var).is_none() {
                                return Err(InstantiateError::MissingCredential {
                                    model_id: model_id.clone(),
                                    var: var.clone(),
                                });
                            }
                        }
                        Arc::new(
                            OpenAiBackend::new(
                                model.base_url.as_deref(),
                                model.api_key_ref.clone(),
                                env.env.clone(),
                            )
                            .with_retry(env.retry),
                        )
                    }
                };
                backends.insert(model_id.clone(), backend);
            }
        }
        for skill_id in &agent.skill_refs {
            if registry.get(skill_id).is_none() {
                let skill = spec.skill(skill_id).expect("validated reference").clone();
                // Names are unique per document (validated), so this cannot clash.
                let _ = registry.register(skill);
            }
        }
        if let Some(memory_id) = &agent.memory_ref {
            let memory = spec.memory(memory_id).expect("validated reference");
            if memory.kind == MemoryKind::NaiveStore {
                memories
                    .entry(memory_id.clone())
                    .or_insert_with(|| Mutex::new(RecencyStore::new(memory.capacity)));
            }
        }
    }

    std::fs::create_dir_all(&env.workdir).map_err(|source| InstantiateError::Workdir {
        path: env.workdir.clone(),
        source,
    })?;

    let agents = used.into_iter().map(|a| (a.id.clone(), a.clone())).collect();
    Ok(WorkflowInstance {
        spec: spec.clone(),
        agents,
        backends,
        mocks,
        tools: ToolRuntime::new(registry, env.sandbox.clone()),
        memories,
        env,
    })
}

impl WorkflowInstance {
    pub fn spec(&self) -> &WorkflowSpec {
        &self.spec
    }

    /// Agents used by the workflow, by id.
    pub fn agents(&self) -> &BTreeMap<String, AgentSpec> {
        &self.agents
    }

    pub fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.get(id)
    }

    pub fn backend(&self, model_id: &str) -> Option<&Arc<dyn ChatBackend>> {
        self.backends.get(model_id)
    }

    /// The scripted backend behind a mock model, for inspecting its call log.
    pub fn mock(&self, model_id: &str) -> Option<&Arc<MockBackend>> {
        self.mocks.get(model_id)
    }

    pub fn tools(&self) -> &ToolRuntime {
        &self.tools
    }

    pub fn env(&self) -> &RuntimeEnv {
        &self.env
    }

    /// Pricing from the runtime table, falling back to prices declared on
    /// the models themselves.
    pub fn pricing(&self) -> PricingTable {
        self.env.pricing.with_models(&self.spec.models)
    }

    /// Runs a task with whichever pattern the workflow declares.
    pub fn execute(
        &self,
        task: &str,
        history: &[Message],
        ctx: &RunContext<'_>,
    ) -> Result<RunResult, EngineError> {
        match self.spec.workflow.pattern {
            Pattern::AutonomousChat => self.run(task, history, ctx),
            Pattern::SequentialChat => self.run_sequential(task, ctx),
        }
    }

    /// Autonomous chat: the initiator sends `task` to the receiver and the
    /// agents take turns until a termination condition holds. `history` is
    /// replayed into every model context but not re-emitted.
    pub fn run(
        &self,
        task: &str,
        history: &[Message],
        ctx: &RunContext<'_>,
    ) -> Result<RunResult, EngineError> {
        if task.trim().is_empty() {
            return Err(EngineError::EmptyTask);
        }
        let found = self.spec.workflow.pattern;
        if found != Pattern::AutonomousChat {
            return Err(EngineError::PatternMismatch {
                expected: Pattern::AutonomousChat,
                found,
            });
        }
        Ok(runner::Runner::new(self, ctx, history).run_autonomous(task))
    }

    /// Sequential chat: each agent in order gets a bounded exchange with an
    /// implicit user proxy; the next agent's task is the summary of the
    /// previous agent's output.
    pub fn run_sequential(&self, task: &str, ctx: &RunContext<'_>) -> Result<RunResult, EngineError> {
        if task.trim().is_empty() {
            return Err(EngineError::EmptyTask);
        }
        let found = self.spec.workflow.pattern;
        if found != Pattern::SequentialChat {
            return Err(EngineError::PatternMismatch {
                expected: Pattern::SequentialChat,
                found,
            });
        }
        Ok(runner::Runner::new(self, ctx, &[]).run_sequential(task))
    }

    /// Picks the next speaker of a group chat given the messages so far.
    pub fn select_next_speaker(&self, group_id: &str, transcript: &[Message]) -> Result<String, EngineError> {
        let group = self
            .agents
            .get(group_id)
            .filter(|g| g.is_group())
            .ok_or_else(|| EngineError::UnknownGroup(group_id.to_string()))?;
        Ok(speaker::select(self, group, transcript).id.clone())
    }

    fn members(&self, group: &AgentSpec) -> Vec<&AgentSpec> {
        group
            .members
            .iter()
            .filter_map(|id| self.agents.get(id))
            .collect()
    }
}
