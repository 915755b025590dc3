//! Skill registration and sandboxed execution.
//!
//! Skills and agent-authored code blocks run as separate processes inside a
//! session-scoped working directory. Each run is time-limited, sees only an
//! allow-listed environment, and on Linux is confined with Landlock to read
//! system directories and read/write its own workdir. Files created or
//! modified in the workdir during a run are reported as artifacts.
//!
//! # Calling convention
//!
//! Arguments reach the process two ways:
//!
//! - `AGENTLOOM_ARGS` holds the arguments as a JSON object;
//! - argv carries one `key=value` pair per argument, sorted by key (string
//!   values verbatim, everything else as JSON).

#[cfg(target_os = "linux")]
mod landlock;
mod sandbox;
mod snapshot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{SkillLanguage, SkillSpec};

pub use sandbox::{Isolation, Sandbox, SandboxConfig, DEFAULT_GRACE, DEFAULT_OUTPUT_LIMIT};
pub use snapshot::{diff_snapshots, snapshot, Snapshot, INTERNAL_DIR};

/// Subdirectory of a session directory that skills run in.
pub const SCRATCH_DIR: &str = "scratch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolTarget {
    /// A registered skill, by id.
    Skill { id: String },
    /// Code written by an agent.
    Inline {
        language: SkillLanguage,
        source: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolInvocation {
    pub target: ToolTarget,
    pub arguments: Map<String, Value>,
    pub session_workdir: PathBuf,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NonzeroExit,
    Timeout,
    SpawnError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Code,
    Document,
    Data,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the session workdir, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub media_kind: MediaKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub status: ToolStatus,
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_s: f64,
    pub artifacts: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_kind: Option<FailureKind>,
}

impl ToolResult {
    pub fn is_success(&self) -> bool {
        self.status == ToolStatus::Success
    }

    /// A failed result for a process that never started.
    pub fn spawn_error(message: impl Into<String>) -> Self {
        ToolResult {
            status: ToolStatus::Failure,
            exit_code: -1,
            stdout: String::new(),
            stderr: message.into(),
            duration_s: 0.0,
            artifacts: Vec::new(),
            failure_kind: Some(FailureKind::SpawnError),
        }
    }
}

/// Media kind by file extension.
pub fn classify_artifact(path: impl AsRef<Path>) -> MediaKind {
    let ext = path
        .as_ref()
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png" | "jpg" | "jpeg" | "gif" | "svg" | "webp") => MediaKind::Image,
        Some("py" | "js" | "ts" | "sh" | "rs") => MediaKind::Code,
        Some("md" | "pdf" | "txt") => MediaKind::Document,
        Some("csv" | "json") => MediaKind::Data,
        _ => MediaKind::Other,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("a skill named `{name}` is already registered (id `{existing}`)")]
    DuplicateName { name: String, existing: String },
    #[error("a skill with id `{0}` is already registered")]
    DuplicateId(String),
}

/// Skills by id, with names unique across the registry.
#[derive(Debug, Clone, Default)]
pub struct SkillRegistry {
    skills: BTreeMap<String, SkillSpec>,
}

impl SkillRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, skill: SkillSpec) -> Result<(), RegistryError> {
        if self.skills.contains_key(&skill.id) {
            return Err(RegistryError::DuplicateId(skill.id));
        }
        if let Some(existing) = self.by_name(&skill.name) {
            return Err(RegistryError::DuplicateName {
                name: skill.name.clone(),
                existing: existing.id.clone(),
            });
        }
        self.skills.insert(skill.id.clone(), skill);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SkillSpec> {
        self.skills.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&SkillSpec> {
        self.skills.values().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// A skill registry bound to a sandbox.
#[derive(Clone)]
pub struct ToolRuntime {
    registry: SkillRegistry,
    sandbox: Sandbox,
}

impl ToolRuntime {
    pub fn new(registry: SkillRegistry, sandbox: Sandbox) -> Self {
        ToolRuntime { registry, sandbox }
    }

    pub fn registry(&self) -> &SkillRegistry {
        &self.registry
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Runs a skill or inline code block. Failures, including a process
    /// that cannot be started, are reported in the result.
    pub fn execute(&self, inv: &ToolInvocation) -> ToolResult {
        match &inv.target {
            ToolTarget::Skill { id } => match self.registry.get(id) {
                Some(skill) => self.sandbox.run(
                    skill.language,
                    &skill.source,
                    &inv.arguments,
                    &skill.env_allowlist,
                    &inv.session_workdir,
                    inv.timeout_s,
                ),
                None => ToolResult::spawn_error(format!("skill `{id}` is not registered")),
            },
            ToolTarget::Inline { language, source } => self.sandbox.run(
                *language,
                source,
                &inv.arguments,
                &[],
                &inv.session_workdir,
                inv.timeout_s,
            ),
        }
    }
}
