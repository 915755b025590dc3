use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    AgentSpec, AgentType, MemorySpec, ModelConfig, Pattern, Provider, SkillSpec,
    SpeakerSelection, WorkflowDef, WorkflowSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

/// Outcome of [`validate`]. `ok` holds exactly when no issue is an error.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(issues: Vec<Issue>) -> Self {
        let ok = issues.iter().all(|i| i.severity != Severity::Error);
        ValidationReport { ok, issues }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }
}

/// Resolves entity references. Implemented by workflow documents (the
/// embedded registry) and by the entity store.
pub trait RefLookup {
    fn model(&self, id: &str) -> Option<ModelConfig>;
    fn skill(&self, id: &str) -> Option<SkillSpec>;
    fn memory(&self, id: &str) -> Option<MemorySpec>;
    fn agent(&self, id: &str) -> Option<AgentSpec>;
}

impl RefLookup for WorkflowSpec {
    fn model(&self, id: &str) -> Option<ModelConfig> {
        WorkflowSpec::model(self, id).cloned()
    }
    fn skill(&self, id: &str) -> Option<SkillSpec> {
        WorkflowSpec::skill(self, id).cloned()
    }
    fn memory(&self, id: &str) -> Option<MemorySpec> {
        WorkflowSpec::memory(self, id).cloned()
    }
    fn agent(&self, id: &str) -> Option<AgentSpec> {
        WorkflowSpec::agent(self, id).cloned()
    }
}

#[derive(Default)]
struct Issues(Vec<Issue>);

impl Issues {
    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Error,
            path: path.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Warning,
            path: path.into(),
            message: message.into(),
        });
    }
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Checks every invariant of a workflow document. Pure: problems are
/// reported, never thrown.
pub fn validate(spec: &WorkflowSpec) -> ValidationReport {
    let mut issues = Issues::default();

    duplicate_ids(spec.models.iter().map(|m| m.id.as_str()), "models", &mut issues);
    duplicate_ids(spec.skills.iter().map(|s| s.id.as_str()), "skills", &mut issues);
    duplicate_ids(spec.memories.iter().map(|m| m.id.as_str()), "memories", &mut issues);
    duplicate_ids(spec.agents.iter().map(|a| a.id.as_str()), "agents", &mut issues);

    for m in &spec.models {
        issues.0.extend(validate_model(m, &format!("models[{}]", m.id)));
    }
    let mut skill_names = BTreeMap::new();
    for s in &spec.skills {
        let path = format!("skills[{}]", s.id);
        issues.0.extend(validate_skill(s, &path));
        if let Some(prev) = skill_names.insert(s.name.as_str(), s.id.as_str()) {
            issues.error(
                join(&path, "name"),
                format!("skill name `{}` is also used by skill `{prev}`", s.name),
            );
        }
    }
    for m in &spec.memories {
        issues.0.extend(validate_memory(m, &format!("memories[{}]", m.id)));
    }
    let mut agent_names = BTreeMap::new();
    for a in &spec.agents {
        let path = format!("agents[{}]", a.id);
        issues.0.extend(validate_agent(a, &path, spec));
        if let Some(prev) = agent_names.insert(a.name.as_str(), a.id.as_str()) {
            issues.error(
                join(&path, "name"),
                format!("agent name `{}` is also used by agent `{prev}`", a.name),
            );
        }
    }
    issues
        .0
        .extend(validate_workflow_def(&spec.workflow, "workflow", spec));

    unreferenced(spec, &mut issues);
    ValidationReport::from_issues(issues.0)
}

fn duplicate_ids<'a>(ids: impl Iterator<Item = &'a str>, registry: &str, issues: &mut Issues) {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            issues.error(
                format!("{registry}[{id}]"),
                format!("id `{id}` appears more than once in `{registry}`"),
            );
        }
    }
}

fn unreferenced(spec: &WorkflowSpec, issues: &mut Issues) {
    let mut agents = BTreeSet::new();
    let mut stack: Vec<&str> = spec.workflow.agent_refs();
    while let Some(id) = stack.pop() {
        if agents.insert(id) {
            if let Some(a) = spec.agent(id) {
                stack.extend(a.members.iter().map(String::as_str));
            }
        }
    }
    let mut models = BTreeSet::new();
    let mut skills = BTreeSet::new();
    let mut memories = BTreeSet::new();
    for a in spec.agents.iter().filter(|a| agents.contains(a.id.as_str())) {
        models.extend(a.model_ref.as_deref());
        skills.extend(a.skill_refs.iter().map(String::as_str));
        memories.extend(a.memory_ref.as_deref());
    }
    for a in &spec.agents {
        if !agents.contains(a.id.as_str()) {
            issues.warn(format!("agents[{}]", a.id), "agent is not used by the workflow");
        }
    }
    for m in &spec.models {
        if !models.contains(m.id.as_str()) {
            issues.warn(format!("models[{}]", m.id), "model is not used by the workflow");
        }
    }
    for s in &spec.skills {
        if !skills.contains(s.id.as_str()) {
            issues.warn(format!("skills[{}]", s.id), "skill is not used by the workflow");
        }
    }
    for m in &spec.memories {
        if !memories.contains(m.id.as_str()) {
            issues.warn(format!("memories[{}]", m.id), "memory is not used by the workflow");
        }
    }
}

pub fn validate_model(m: &ModelConfig, prefix: &str) -> Vec<Issue> {
    let mut issues = Issues::default();
    if m.id.is_empty() {
        issues.error(join(prefix, "id"), "id must not be empty");
    }
    if !(0.0..=2.0).contains(&m.temperature) {
        issues.error(
            join(prefix, "temperature"),
            format!("temperature {} is outside [0, 2]", m.temperature),
        );
    }
    if m.max_tokens < 1 {
        issues.error(join(prefix, "max_tokens"), "max_tokens must be at least 1");
    }
    if m.model_name.is_empty() {
        issues.error(join(prefix, "model_name"), "model_name must not be empty");
    }
    if let Some(key_ref) = &m.api_key_ref {
        if !is_identifier(key_ref) {
            issues.error(
                join(prefix, "api_key_ref"),
                "api_key_ref must name an environment variable, not hold a secret",
            );
        }
    }
    if let Some(p) = &m.pricing {
        if !(p.prompt_per_1k >= 0.0 && p.completion_per_1k >= 0.0) {
            issues.error(join(prefix, "pricing"), "rates must be non-negative");
        }
    }
    match m.provider {
        Provider::Mock => match &m.script {
            None => issues.error(join(prefix, "script"), "mock models need a script"),
            Some(s) if s.steps.is_empty() => {
                issues.error(join(prefix, "script.steps"), "script must have at least one step")
            }
            Some(_) => {}
        },
        Provider::OpenaiCompatible => {
            if m.script.is_some() {
                issues.warn(join(prefix, "script"), "script is ignored for openai-compatible models");
            }
            if let Some(url) = &m.base_url {
                if !(url.starts_with("http://") || url.starts_with("https://")) {
                    issues.error(join(prefix, "base_url"), "base_url must be an http(s) URL");
                }
            }
        }
    }
    issues.0
}

pub fn validate_skill(s: &SkillSpec, prefix: &str) -> Vec<Issue> {
    let mut issues = Issues::default();
    if s.id.is_empty() {
        issues.error(join(prefix, "id"), "id must not be empty");
    }
    if !is_identifier(&s.name) {
        issues.error(
            join(prefix, "name"),
            format!("`{}` is not a valid function identifier", s.name),
        );
    }
    if s.source.trim().is_empty() {
        issues.error(join(prefix, "source"), "source must not be empty");
    }
    if !(s.timeout_s > 0.0 && s.timeout_s.is_finite()) {
        issues.error(join(prefix, "timeout_s"), "timeout_s must be a positive number");
    }
    for (i, var) in s.env_allowlist.iter().enumerate() {
        if !is_identifier(var) {
            issues.error(
                format!("{}[{i}]", join(prefix, "env_allowlist")),
                format!("`{var}` is not an environment variable name"),
            );
        }
    }
    if let Some(params) = &s.parameters {
        if !params.is_object() {
            issues.error(join(prefix, "parameters"), "parameters must be a JSON schema object");
        }
    }
    issues.0
}

pub fn validate_memory(m: &MemorySpec, prefix: &str) -> Vec<Issue> {
    let mut issues = Issues::default();
    if m.id.is_empty() {
        issues.error(join(prefix, "id"), "id must not be empty");
    }
    if m.capacity == Some(0) {
        issues.error(join(prefix, "capacity"), "capacity must be at least 1");
    }
    issues.0
}

/// Checks an agent's own invariants and that its references resolve.
pub fn validate_agent(a: &AgentSpec, prefix: &str, lookup: &dyn RefLookup) -> Vec<Issue> {
    let mut issues = Issues::default();
    if a.id.is_empty() {
        issues.error(join(prefix, "id"), "id must not be empty");
    }
    if a.name.trim().is_empty() {
        issues.error(join(prefix, "name"), "name must not be empty");
    }
    if a.max_consecutive_replies < 1 {
        issues.error(
            join(prefix, "max_consecutive_replies"),
            "max_consecutive_replies must be at least 1",
        );
    }
    match &a.model_ref {
        Some(id) if lookup.model(id).is_none() => issues.error(
            join(prefix, "model_ref"),
            format!("model `{id}` does not exist"),
        ),
        None if a.agent_type == AgentType::Assistant => {
            issues.error(join(prefix, "model_ref"), "assistant agents need a model")
        }
        None if a.is_group() && a.speaker_selection == SpeakerSelection::ModelSelected => issues
            .error(
                join(prefix, "model_ref"),
                "model_selected speaker selection needs a model",
            ),
        _ => {}
    }
    let mut tool_names = BTreeMap::new();
    for (i, id) in a.skill_refs.iter().enumerate() {
        let path = format!("{}[{i}]", join(prefix, "skill_refs"));
        match lookup.skill(id) {
            None => issues.error(path, format!("skill `{id}` does not exist")),
            Some(skill) => {
                if let Some(prev) = tool_names.insert(skill.name.clone(), id.clone()) {
                    issues.error(
                        path,
                        format!("skills `{prev}` and `{id}` share the name `{}`", skill.name),
                    );
                }
            }
        }
    }
    if let Some(id) = &a.memory_ref {
        if lookup.memory(id).is_none() {
            issues.error(join(prefix, "memory_ref"), format!("memory `{id}` does not exist"));
        }
    }
    if a.is_group() {
        if a.members.len() < 2 {
            issues.error(
                join(prefix, "members"),
                "group chats need members length ≥ 2",
            );
        }
        let mut seen = BTreeSet::new();
        for (i, id) in a.members.iter().enumerate() {
            let path = format!("{}[{i}]", join(prefix, "members"));
            if !seen.insert(id.as_str()) {
                issues.error(path.clone(), format!("member `{id}` is listed twice"));
            }
            if *id == a.id {
                issues.error(path, "a group chat cannot contain itself");
                continue;
            }
            match lookup.agent(id) {
                None => issues.error(path, format!("agent `{id}` does not exist")),
                Some(member) if member.is_group() => {
                    issues.error(path, format!("group chats cannot be nested (`{id}`)"))
                }
                Some(_) => {}
            }
        }
    } else if !a.members.is_empty() {
        issues.warn(join(prefix, "members"), "members are only used by group chats");
    }
    issues.0
}

/// Checks the workflow's pattern-specific references and termination.
pub fn validate_workflow_def(w: &WorkflowDef, prefix: &str, lookup: &dyn RefLookup) -> Vec<Issue> {
    let mut issues = Issues::default();
    if w.id.is_empty() {
        issues.error(join(prefix, "id"), "id must not be empty");
    }
    if w.termination.max_turns < 1 {
        issues.error(
            join(prefix, "termination.max_turns"),
            "max_turns must be at least 1",
        );
    }
    if w.termination.termination_keyword.is_empty() {
        issues.error(
            join(prefix, "termination.termination_keyword"),
            "termination_keyword must not be empty",
        );
    }
    if let Some(ui) = &w.ui {
        if !ui.is_object() {
            issues.error(join(prefix, "ui"), "ui must be an object");
        }
    }
    match w.pattern {
        Pattern::AutonomousChat => {
            let initiator = resolve_ref(w.initiator_ref.as_deref(), "initiator_ref", prefix, lookup, &mut issues);
            let receiver = resolve_ref(w.receiver_ref.as_deref(), "receiver_ref", prefix, lookup, &mut issues);
            if let (Some(i), Some(r)) = (&w.initiator_ref, &w.receiver_ref) {
                if i == r {
                    issues.error(
                        join(prefix, "receiver_ref"),
                        "initiator and receiver must be different agents",
                    );
                }
            }
            if let Some(initiator) = &initiator {
                if initiator.is_group() {
                    issues.error(
                        join(prefix, "initiator_ref"),
                        "a group chat cannot initiate a conversation",
                    );
                }
            }
            if let (Some(initiator), Some(receiver)) = (&initiator, &receiver) {
                let mut backed = initiator.model_ref.is_some();
                if receiver.is_group() {
                    backed |= receiver
                        .members
                        .iter()
                        .filter_map(|m| lookup.agent(m))
                        .any(|m| m.model_ref.is_some());
                } else {
                    backed |= receiver.model_ref.is_some();
                }
                if !backed {
                    issues.error(
                        join(prefix, "receiver_ref"),
                        "at least one participant must be bound to a model",
                    );
                }
            }
            if !w.sequence.is_empty() {
                issues.warn(
                    join(prefix, "sequence"),
                    "sequence is only used by sequential_chat",
                );
            }
        }
        Pattern::SequentialChat => {
            if w.sequence.is_empty() {
                issues.error(
                    join(prefix, "sequence"),
                    "sequential chats need at least one agent",
                );
            }
            for (i, id) in w.sequence.iter().enumerate() {
                let path = format!("{}[{i}]", join(prefix, "sequence"));
                match lookup.agent(id) {
                    None => issues.error(path, format!("agent `{id}` does not exist")),
                    Some(a) if a.model_ref.is_none() && !a.is_group() => {
                        issues.error(path, format!("agent `{id}` in a sequence needs a model"))
                    }
                    Some(_) => {}
                }
            }
            if w.initiator_ref.is_some() || w.receiver_ref.is_some() {
                issues.warn(
                    prefix.to_string(),
                    "initiator_ref and receiver_ref are only used by autonomous_chat",
                );
            }
        }
    }
    issues.0
}

fn resolve_ref(
    id: Option<&str>,
    field: &str,
    prefix: &str,
    lookup: &dyn RefLookup,
    issues: &mut Issues,
) -> Option<AgentSpec> {
    match id {
        None => {
            issues.error(join(prefix, field), format!("autonomous_chat needs `{field}`"));
            None
        }
        Some(id) => {
            let agent = lookup.agent(id);
            if agent.is_none() {
                issues.error(join(prefix, field), format!("agent `{id}` does not exist"));
            }
            agent
        }
    }
}
