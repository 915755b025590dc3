//! Durable storage for entities, sessions and messages.
//!
//! Every entity kind (models, skills, memories, agents, workflows,
//! sessions) is stored with a server-assigned UUIDv4 id. References between
//! entities are checked on every write, and deleting an entity that others
//! still reference is refused unless `force` is set, in which case the
//! referrers are deleted too. A session's link to its workflow is the one
//! exception: deleting a workflow leaves its sessions in place, and running
//! such a session reports the missing workflow.
//!
//! [`SqliteStore`] is the bundled implementation: one database file, safe
//! for concurrent use from many threads.

mod gallery;
mod sqlite;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::Message;
use crate::schema::{
    from_value_with_path, AgentSpec, MemorySpec, ModelConfig, SchemaError, SkillSpec,
    ValidationReport, WorkflowDef,
};

pub use gallery::{export_gallery, import_gallery, resolve_workflow, validate_bundle, GalleryItem};
pub use sqlite::{SqliteStore, DB_FILE_NAME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Model,
    Skill,
    Memory,
    Agent,
    Workflow,
    Session,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Model,
        EntityKind::Skill,
        EntityKind::Memory,
        EntityKind::Agent,
        EntityKind::Workflow,
        EntityKind::Session,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Model => "model",
            EntityKind::Skill => "skill",
            EntityKind::Memory => "memory",
            EntityKind::Agent => "agent",
            EntityKind::Workflow => "workflow",
            EntityKind::Session => "session",
        }
    }

    /// Collection name used in URLs, e.g. `models`.
    pub fn plural(self) -> &'static str {
        match self {
            EntityKind::Model => "models",
            EntityKind::Skill => "skills",
            EntityKind::Memory => "memories",
            EntityKind::Agent => "agents",
            EntityKind::Workflow => "workflows",
            EntityKind::Session => "sessions",
        }
    }

    pub fn from_plural(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.plural() == s)
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown entity kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    #[default]
    Idle,
    Running,
    AwaitingHuman,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Idle => "idle",
            SessionStatus::Running => "running",
            SessionStatus::AwaitingHuman => "awaiting_human",
        }
    }
}

/// A conversation bound to a workflow. `status`, `workdir` and
/// `message_refs` are maintained by the store; values sent by clients are
/// ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    #[serde(default)]
    pub id: String,
    pub workflow_ref: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub status: SessionStatus,
    #[serde(default)]
    pub workdir: String,
    #[serde(default)]
    pub message_refs: Vec<String>,
    /// Set when the session was recovered from an interrupted run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Session {
    pub fn new(workflow_ref: impl Into<String>, name: impl Into<String>) -> Self {
        Session {
            id: String::new(),
            workflow_ref: workflow_ref.into(),
            name: name.into(),
            status: SessionStatus::Idle,
            workdir: String::new(),
            message_refs: Vec::new(),
            note: None,
        }
    }
}

/// The spec value stored for an entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Model(ModelConfig),
    Skill(SkillSpec),
    Memory(MemorySpec),
    Agent(AgentSpec),
    Workflow(WorkflowDef),
    Session(Session),
}

impl Payload {
    pub fn kind(&self) -> EntityKind {
        match self {
            Payload::Model(_) => EntityKind::Model,
            Payload::Skill(_) => EntityKind::Skill,
            Payload::Memory(_) => EntityKind::Memory,
            Payload::Agent(_) => EntityKind::Agent,
            Payload::Workflow(_) => EntityKind::Workflow,
            Payload::Session(_) => EntityKind::Session,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Payload::Model(x) => &x.id,
            Payload::Skill(x) => &x.id,
            Payload::Memory(x) => &x.id,
            Payload::Agent(x) => &x.id,
            Payload::Workflow(x) => &x.id,
            Payload::Session(x) => &x.id,
        }
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        let id = id.into();
        match self {
            Payload::Model(x) => x.id = id,
            Payload::Skill(x) => x.id = id,
            Payload::Memory(x) => x.id = id,
            Payload::Agent(x) => x.id = id,
            Payload::Workflow(x) => x.id = id,
            Payload::Session(x) => x.id = id,
        }
    }

    /// Parses a request body for `kind`. A missing `id` is read as empty.
    pub fn from_json(kind: EntityKind, mut value: Value) -> Result<Payload, SchemaError> {
        if let Value::Object(obj) = &mut value {
            obj.entry("id").or_insert_with(|| Value::String(String::new()));
        }
        Ok(match kind {
            EntityKind::Model => Payload::Model(from_value_with_path(value)?),
            EntityKind::Skill => Payload::Skill(from_value_with_path(value)?),
            EntityKind::Memory => Payload::Memory(from_value_with_path(value)?),
            EntityKind::Agent => Payload::Agent(from_value_with_path(value)?),
            EntityKind::Workflow => Payload::Workflow(from_value_with_path(value)?),
            EntityKind::Session => Payload::Session(from_value_with_path(value)?),
        })
    }

    /// Outgoing references, in field order.
    pub fn references(&self) -> Vec<EntityRef> {
        let mut refs = Vec::new();
        let mut push = |kind, id: &String| {
            let r = EntityRef { kind, id: id.clone() };
            if !refs.contains(&r) {
                refs.push(r);
            }
        };
        match self {
            Payload::Agent(a) => {
                a.model_ref.iter().for_each(|id| push(EntityKind::Model, id));
                a.skill_refs.iter().for_each(|id| push(EntityKind::Skill, id));
                a.memory_ref.iter().for_each(|id| push(EntityKind::Memory, id));
                a.members.iter().for_each(|id| push(EntityKind::Agent, id));
            }
            Payload::Workflow(w) => {
                for id in w.agent_refs() {
                    push(EntityKind::Agent, &id.to_string());
                }
            }
            Payload::Session(s) => push(EntityKind::Workflow, &s.workflow_ref),
            _ => {}
        }
        refs
    }

    pub fn payload_json(&self) -> Value {
        match self {
            Payload::Model(x) => serde_json::to_value(x),
            Payload::Skill(x) => serde_json::to_value(x),
            Payload::Memory(x) => serde_json::to_value(x),
            Payload::Agent(x) => serde_json::to_value(x),
            Payload::Workflow(x) => serde_json::to_value(x),
            Payload::Session(x) => serde_json::to_value(x),
        }
        .expect("spec values serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} `{}`", self.kind, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    #[serde(flatten)]
    pub payload: Payload,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl Entity {
    pub fn kind(&self) -> EntityKind {
        self.payload.kind()
    }

    pub fn as_session(&self) -> Option<&Session> {
        match &self.payload {
            Payload::Session(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ListFilter {
    /// Only entities carrying this tag.
    pub tag: Option<String>,
    /// Sessions bound to this workflow.
    pub workflow_ref: Option<String>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: EntityKind, id: String },
    #[error("invalid {kind}: {report}")]
    Invalid {
        kind: EntityKind,
        report: ValidationReport,
    },
    #[error("{message}")]
    Conflict {
        message: String,
        referrers: Vec<EntityRef>,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{0}")]
    Unsupported(String),
    #[error("cannot open database {path}: {message}")]
    Open { path: String, message: String },
    #[error("database error: {0}")]
    Database(String),
    #[error("corrupt record {kind} `{id}`: {message}")]
    Corrupt {
        kind: String,
        id: String,
        message: String,
    },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::NotFound { .. } => "not_found",
            StoreError::Invalid { .. } | StoreError::Schema(_) => "validation_error",
            StoreError::Conflict { .. } => "conflict",
            StoreError::Unsupported(_) => "unsupported",
            StoreError::Open { .. } | StoreError::Database(_) | StoreError::Corrupt { .. } => "storage_error",
        }
    }
}

/// A reference that points at nothing, found by [`Store::audit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dangling {
    pub from: EntityRef,
    pub to: EntityRef,
}

/// The storage interface the server and CLI program against.
pub trait Store: Send + Sync {
    /// Stores `payload` under a fresh id; the payload's own id is ignored.
    fn create(&self, payload: Payload, tags: Vec<String>) -> Result<Entity, StoreError>;
    fn get(&self, kind: EntityKind, id: &str) -> Result<Entity, StoreError>;
    /// Newest first.
    fn list(&self, kind: EntityKind, filter: &ListFilter) -> Result<Vec<Entity>, StoreError>;
    /// Replaces the payload of entity `id`. `tags: None` keeps the tags.
    fn update(&self, id: &str, payload: Payload, tags: Option<Vec<String>>) -> Result<Entity, StoreError>;
    /// Returns every entity removed, the target first.
    fn delete(&self, kind: EntityKind, id: &str, force: bool) -> Result<Vec<EntityRef>, StoreError>;
    /// Entities that reference `kind`/`id`.
    fn referrers(&self, kind: EntityKind, id: &str) -> Result<Vec<EntityRef>, StoreError>;

    fn append_message(&self, session_id: &str, message: &Message) -> Result<(), StoreError>;
    fn load_history(&self, session_id: &str) -> Result<Vec<Message>, StoreError>;

    /// Moves an idle or waiting session to `running`. Fails with `Conflict`
    /// if it is already running.
    fn begin_run(&self, session_id: &str) -> Result<Session, StoreError>;
    /// Leaves `running` for `status`.
    fn end_run(&self, session_id: &str, status: SessionStatus) -> Result<(), StoreError>;

    /// Scans every stored reference and reports the dangling ones.
    fn audit(&self) -> Result<Vec<Dangling>, StoreError>;
}
