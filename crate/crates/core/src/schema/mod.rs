//! The declarative entity model and its document format.
//!
//! A workflow document is a UTF-8 JSON object
//! `{version, workflow, agents[], models[], skills[], memories[]}`. Agents
//! refer to models, skills and memories by id; the workflow refers to agents
//! by id. Exported documents inline every referenced entity so they can be
//! shared, stored in a gallery or run directly from the command line.

mod validate;

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::MockScript;

pub use validate::{
    validate, validate_agent, validate_memory, validate_model, validate_skill,
    validate_workflow_def, Issue, RefLookup, Severity, ValidationReport,
};

/// Version string written by [`export_workflow`].
pub const SCHEMA_VERSION: &str = "1.0";

/// Versions [`parse_workflow`] accepts.
pub const SUPPORTED_VERSIONS: &[&str] = &["1.0"];

pub const DEFAULT_MAX_TURNS: u32 = 10;
pub const DEFAULT_TERMINATION_KEYWORD: &str = "TERMINATE";
pub const DEFAULT_MAX_CONSECUTIVE_REPLIES: u32 = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_SKILL_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    OpenaiCompatible,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPricing {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

/// A generative model an agent can be bound to.
///
/// Only the *name* of the environment variable holding the API key is ever
/// stored; the secret is read when a request is sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub name: String,
    pub provider: Provider,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<ModelPricing>,
    /// Scripted replies for `provider = "mock"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<MockScript>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkillLanguage {
    Shell,
    InterpretedScript,
}

/// An executable tool an agent may call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillSpec {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub language: SkillLanguage,
    pub source: String,
    #[serde(default = "default_skill_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub env_allowlist: Vec<String>,
    /// JSON schema describing the call arguments, advertised to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    ShortTermTranscript,
    NaiveStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySpec {
    pub id: String,
    pub kind: MemoryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    UserProxy,
    Assistant,
    GroupChat,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanInputMode {
    #[default]
    Never,
    Always,
    OnTermination,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerSelection {
    #[default]
    RoundRobin,
    ModelSelected,
}

/// Ties a model, skills, memory and behavior parameters together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AgentDoc")]
pub struct AgentSpec {
    pub id: String,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub name: String,
    pub system_message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
    pub skill_refs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_ref: Option<String>,
    pub max_consecutive_replies: u32,
    pub human_input_mode: HumanInputMode,
    pub code_execution: bool,
    pub members: Vec<String>,
    pub speaker_selection: SpeakerSelection,
}

/// Wire shape of an agent; `code_execution` defaults depend on the type.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDoc {
    id: String,
    #[serde(rename = "type")]
    agent_type: AgentType,
    name: String,
    #[serde(default)]
    system_message: String,
    #[serde(default)]
    model_ref: Option<String>,
    #[serde(default)]
    skill_refs: Vec<String>,
    #[serde(default)]
    memory_ref: Option<String>,
    #[serde(default = "default_max_consecutive_replies")]
    max_consecutive_replies: u32,
    #[serde(default)]
    human_input_mode: HumanInputMode,
    #[serde(default)]
    code_execution: Option<bool>,
    #[serde(default)]
    members: Vec<String>,
    #[serde(default)]
    speaker_selection: SpeakerSelection,
}

impl From<AgentDoc> for AgentSpec {
    fn from(doc: AgentDoc) -> Self {
        let code_execution = doc
            .code_execution
            .unwrap_or(doc.agent_type == AgentType::UserProxy);
        AgentSpec {
            id: doc.id,
            agent_type: doc.agent_type,
            name: doc.name,
            system_message: doc.system_message,
            model_ref: doc.model_ref,
            skill_refs: doc.skill_refs,
            memory_ref: doc.memory_ref,
            max_consecutive_replies: doc.max_consecutive_replies,
            human_input_mode: doc.human_input_mode,
            code_execution,
            members: doc.members,
            speaker_selection: doc.speaker_selection,
        }
    }
}

impl AgentSpec {
    /// A bare agent of the given type with every optional field defaulted.
    pub fn new(id: impl Into<String>, agent_type: AgentType, name: impl Into<String>) -> Self {
        AgentSpec {
            id: id.into(),
            agent_type,
            name: name.into(),
            system_message: String::new(),
            model_ref: None,
            skill_refs: Vec::new(),
            memory_ref: None,
            max_consecutive_replies: DEFAULT_MAX_CONSECUTIVE_REPLIES,
            human_input_mode: HumanInputMode::Never,
            code_execution: agent_type == AgentType::UserProxy,
            members: Vec::new(),
            speaker_selection: SpeakerSelection::RoundRobin,
        }
    }

    pub fn is_group(&self) -> bool {
        self.agent_type == AgentType::GroupChat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    AutonomousChat,
    SequentialChat,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMethod {
    #[default]
    LastMessage,
    TruncatedConcat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Termination {
    #[serde(default = "default_max_turns")]
    pub max_turns: u32,
    #[serde(default = "default_termination_keyword")]
    pub termination_keyword: String,
}

impl Default for Termination {
    fn default() -> Self {
        Termination {
            max_turns: DEFAULT_MAX_TURNS,
            termination_keyword: DEFAULT_TERMINATION_KEYWORD.to_string(),
        }
    }
}

/// How a set of agents interacts, without the entities themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDef {
    pub id: String,
    pub name: String,
    pub pattern: Pattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initiator_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver_ref: Option<String>,
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub termination: Termination,
    #[serde(default)]
    pub summary_method: SummaryMethod,
    /// Canvas layout and other editor state; carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui: Option<Value>,
}

impl WorkflowDef {
    /// Every agent id the workflow names directly, in declaration order.
    pub fn agent_refs(&self) -> Vec<&str> {
        let mut refs: Vec<&str> = Vec::new();
        for r in self
            .initiator_ref
            .iter()
            .chain(self.receiver_ref.iter())
            .chain(self.sequence.iter())
        {
            if !refs.contains(&r.as_str()) {
                refs.push(r);
            }
        }
        refs
    }
}

/// A self-contained workflow document: the workflow plus every entity it
/// references. Registries are kept sorted by id so that two documents that
/// differ only in entity order compare (and export) equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub version: String,
    pub workflow: WorkflowDef,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub skills: Vec<SkillSpec>,
    #[serde(default)]
    pub memories: Vec<MemorySpec>,
}

/// A component bundle: like a workflow document, but the workflow is
/// optional. Gallery items for agents, models and skills use this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow: Option<WorkflowDef>,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub skills: Vec<SkillSpec>,
    #[serde(default)]
    pub memories: Vec<MemorySpec>,
}

impl WorkflowSpec {
    pub fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn skill(&self, id: &str) -> Option<&SkillSpec> {
        self.skills.iter().find(|s| s.id == id)
    }

    pub fn memory(&self, id: &str) -> Option<&MemorySpec> {
        self.memories.iter().find(|m| m.id == id)
    }

    /// Sorts every registry by id. Parsing always normalizes.
    pub fn normalize(&mut self) {
        self.agents.sort_by(|a, b| a.id.cmp(&b.id));
        self.models.sort_by(|a, b| a.id.cmp(&b.id));
        self.skills.sort_by(|a, b| a.id.cmp(&b.id));
        self.memories.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn into_bundle(self) -> Bundle {
        Bundle {
            version: self.version,
            workflow: Some(self.workflow),
            agents: self.agents,
            models: self.models,
            skills: self.skills,
            memories: self.memories,
        }
    }
}

impl Bundle {
    pub fn normalize(&mut self) {
        self.agents.sort_by(|a, b| a.id.cmp(&b.id));
        self.models.sort_by(|a, b| a.id.cmp(&b.id));
        self.skills.sort_by(|a, b| a.id.cmp(&b.id));
        self.memories.sort_by(|a, b| a.id.cmp(&b.id));
    }

    /// Converts to a workflow document, if a workflow is present.
    pub fn into_workflow_spec(self) -> Option<WorkflowSpec> {
        let workflow = self.workflow?;
        Some(WorkflowSpec {
            version: self.version,
            workflow,
            agents: self.agents,
            models: self.models,
            skills: self.skills,
            memories: self.memories,
        })
    }
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported schema version `{found}` (supported: {supported})")]
    UnsupportedVersion { found: String, supported: String },
    #[error("document is invalid: {0}")]
    Invalid(ValidationReport),
}

/// Parses a workflow document. Unknown fields are rejected and omitted
/// optional fields take their defaults.
pub fn parse_workflow(doc: &str) -> Result<WorkflowSpec, SchemaError> {
    let mut spec: WorkflowSpec = parse_versioned(doc)?;
    spec.normalize();
    Ok(spec)
}

/// Parses a component bundle (a workflow document whose `workflow` may be
/// absent).
pub fn parse_bundle(doc: &str) -> Result<Bundle, SchemaError> {
    let mut bundle: Bundle = parse_versioned(doc)?;
    bundle.normalize();
    Ok(bundle)
}

fn parse_versioned<T: DeserializeOwned>(doc: &str) -> Result<T, SchemaError> {
    let value: Value = serde_json::from_str(doc).map_err(|e| SchemaError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Some(obj) = value.as_object() else {
        return Err(SchemaError::Schema {
            path: "$".into(),
            message: "document must be a JSON object".into(),
        });
    };
    match obj.get("version") {
        None => {
            return Err(SchemaError::Schema {
                path: "version".into(),
                message: "missing field `version`".into(),
            })
        }
        Some(Value::String(v)) if SUPPORTED_VERSIONS.contains(&v.as_str()) => {}
        Some(Value::String(v)) => {
            return Err(SchemaError::UnsupportedVersion {
                found: v.clone(),
                supported: SUPPORTED_VERSIONS.join(", "),
            })
        }
        Some(_) => {
            return Err(SchemaError::Schema {
                path: "version".into(),
                message: "expected a string".into(),
            })
        }
    }
    from_value_with_path(value)
}

/// Deserializes a JSON value, reporting the failing field path.
pub fn from_value_with_path<T: DeserializeOwned>(value: Value) -> Result<T, SchemaError> {
    serde_path_to_error::deserialize(value).map_err(|err| {
        let mut path = err.path().to_string();
        let message = err.inner().to_string();
        // serde reports unknown fields at the enclosing object; point at the field itself.
        if let Some(field) = unknown_field_name(&message).filter(|f| !path.ends_with(f)) {
            path = if path == "." || path.is_empty() {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        if path == "." || path.is_empty() {
            path = "$".into();
        }
        SchemaError::Schema { path, message }
    })
}

fn unknown_field_name(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

/// Canonical serialization: fields in schema order, registries sorted by id,
/// two-space indentation and a trailing newline. Refuses invalid specs.
pub fn export_workflow(spec: &WorkflowSpec) -> Result<String, SchemaError> {
    let report = validate(spec);
    if !report.ok {
        return Err(SchemaError::Invalid(report));
    }
    let mut canonical = spec.clone();
    canonical.normalize();
    Ok(to_canonical_json(&canonical))
}

/// Canonical serialization of a bundle. Callers validate first.
pub fn export_bundle(bundle: &Bundle) -> String {
    let mut canonical = bundle.clone();
    canonical.normalize();
    to_canonical_json(&canonical)
}

/// Pretty JSON with a trailing newline. Struct fields keep declaration
/// order; map keys are sorted.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("document types always serialize");
    out.push('\n');
    out
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for issue in &self.issues {
            if !first {
                f.write_str("; ")?;
            }
            first = false;
            write!(f, "{}: {} ({:?})", issue.path, issue.message, issue.severity)?;
        }
        if first {
            f.write_str("no issues")?;
        }
        Ok(())
    }
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_skill_timeout() -> f64 {
    DEFAULT_SKILL_TIMEOUT_S
}
fn default_max_consecutive_replies() -> u32 {
    DEFAULT_MAX_CONSECUTIVE_REPLIES
}
fn default_max_turns() -> u32 {
    DEFAULT_MAX_TURNS
}
fn default_termination_keyword() -> String {
    DEFAULT_TERMINATION_KEYWORD.to_string()
}
