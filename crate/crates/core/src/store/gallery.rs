//! Gallery items: self-contained, shareable component documents.
//!
//! A gallery item wraps a [`Bundle`] holding the root component and
//! everything it references:
//!
//! ```json
//! {"kind": "agent", "title": "critic", "description": "", "version": "1",
//!  "root": "<id of the agent inside payload>", "payload": {"version": "1.0", "agents": [...], ...}}
//! ```
//!
//! Importing never reuses ids: every entity in the payload is created afresh
//! and references are rewritten to the new ids. A bare workflow document is
//! accepted as a workflow item.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Entity, EntityKind, EntityRef, Payload, Store, StoreError};
use crate::schema::{
    from_value_with_path, parse_bundle, to_canonical_json, validate, validate_agent,
    validate_memory, validate_model, validate_skill, AgentSpec, Bundle, MemorySpec, ModelConfig,
    RefLookup, SkillSpec, ValidationReport, WorkflowDef, WorkflowSpec, SCHEMA_VERSION,
};

fn default_item_version() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryItem {
    pub kind: EntityKind,
    pub title: String,
    #[serde(default)]
    pub description: String,
    /// Free-form item version.
    #[serde(default = "default_item_version")]
    pub version: String,
    /// Id of the root component inside `payload`.
    pub root: String,
    pub payload: Bundle,
}

impl RefLookup for Bundle {
    fn model(&self, id: &str) -> Option<ModelConfig> {
        self.models.iter().find(|m| m.id == id).cloned()
    }
    fn skill(&self, id: &str) -> Option<SkillSpec> {
        self.skills.iter().find(|s| s.id == id).cloned()
    }
    fn memory(&self, id: &str) -> Option<MemorySpec> {
        self.memories.iter().find(|m| m.id == id).cloned()
    }
    fn agent(&self, id: &str) -> Option<AgentSpec> {
        self.agents.iter().find(|a| a.id == id).cloned()
    }
}

/// Validates a bundle standalone: as a workflow document when it has a
/// workflow, otherwise entity by entity against its own registries.
pub fn validate_bundle(bundle: &Bundle) -> ValidationReport {
    if let Some(spec) = bundle.clone().into_workflow_spec() {
        return validate(&spec);
    }
    let mut issues = Vec::new();
    for m in &bundle.models {
        issues.extend(validate_model(m, &format!("models[{}]", m.id)));
    }
    for s in &bundle.skills {
        issues.extend(validate_skill(s, &format!("skills[{}]", s.id)));
    }
    for m in &bundle.memories {
        issues.extend(validate_memory(m, &format!("memories[{}]", m.id)));
    }
    for a in &bundle.agents {
        issues.extend(validate_agent(a, &format!("agents[{}]", a.id), bundle));
    }
    ValidationReport::from_issues(issues)
}

type Getter<'a> = dyn Fn(EntityKind, &str) -> Result<Entity, StoreError> + 'a;

/// Agents reachable from `roots` through group membership, plus the models,
/// skills and memories they use.
fn collect(get: &Getter<'_>, roots: &[&str]) -> Result<Bundle, StoreError> {
    let mut bundle = Bundle {
        version: SCHEMA_VERSION.to_string(),
        workflow: None,
        agents: Vec::new(),
        models: Vec::new(),
        skills: Vec::new(),
        memories: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    let mut stack: Vec<String> = roots.iter().rev().map(|s| s.to_string()).collect();
    let mut needed: BTreeSet<EntityRef> = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id.clone()) {
            continue;
        }
        let Payload::Agent(agent) = get(EntityKind::Agent, &id)?.payload else {
            unreachable!("agent rows hold agents")
        };
        for r in Payload::Agent(agent.clone()).references() {
            match r.kind {
                EntityKind::Agent => stack.push(r.id),
                _ => {
                    needed.insert(r);
                }
            }
        }
        bundle.agents.push(agent);
    }
    for r in needed {
        match get(r.kind, &r.id)?.payload {
            Payload::Model(m) => bundle.models.push(m),
            Payload::Skill(s) => bundle.skills.push(s),
            Payload::Memory(m) => bundle.memories.push(m),
            _ => {}
        }
    }
    bundle.normalize();
    Ok(bundle)
}

pub(crate) fn resolve_with(get: &Getter<'_>, workflow: WorkflowDef) -> Result<WorkflowSpec, StoreError> {
    let bundle = collect(get, &workflow.agent_refs())?;
    Ok(WorkflowSpec {
        version: SCHEMA_VERSION.to_string(),
        workflow,
        agents: bundle.agents,
        models: bundle.models,
        skills: bundle.skills,
        memories: bundle.memories,
    })
}

/// The self-contained workflow document for a stored workflow.
pub fn resolve_workflow(store: &dyn Store, workflow_id: &str) -> Result<WorkflowSpec, StoreError> {
    let Payload::Workflow(workflow) = store.get(EntityKind::Workflow, workflow_id)?.payload else {
        unreachable!("workflow rows hold workflows")
    };
    resolve_with(&|kind, id| store.get(kind, id), workflow)
}

/// Exports a component and its dependencies as a gallery item.
pub fn export_gallery(store: &dyn Store, kind: EntityKind, id: &str) -> Result<String, StoreError> {
    let get = |kind, id: &str| store.get(kind, id);
    let (title, description, payload) = match store.get(kind, id)?.payload {
        Payload::Workflow(w) => {
            let spec = resolve_with(&get, w)?;
            let report = validate(&spec);
            if !report.ok {
                return Err(StoreError::Invalid { kind, report });
            }
            (spec.workflow.name.clone(), String::new(), spec.into_bundle())
        }
        Payload::Agent(a) => (a.name.clone(), a.system_message.clone(), collect(&get, &[id])?),
        Payload::Model(m) => (m.name.clone(), m.model_name.clone(), single(|b| b.models.push(m))),
        Payload::Skill(s) => (s.name.clone(), s.description.clone(), single(|b| b.skills.push(s))),
        Payload::Memory(m) => (m.id.clone(), String::new(), single(|b| b.memories.push(m))),
        Payload::Session(_) => {
            return Err(StoreError::Unsupported("sessions cannot be exported to the gallery".into()))
        }
    };
    let item = GalleryItem {
        kind,
        title,
        description,
        version: default_item_version(),
        root: id.to_string(),
        payload,
    };
    Ok(to_canonical_json(&item))
}

fn single(fill: impl FnOnce(&mut Bundle)) -> Bundle {
    let mut b = Bundle {
        version: SCHEMA_VERSION.to_string(),
        workflow: None,
        agents: Vec::new(),
        models: Vec::new(),
        skills: Vec::new(),
        memories: Vec::new(),
    };
    fill(&mut b);
    b
}

/// Parses, validates and stores a gallery item (or bare workflow document)
/// under fresh ids. Returns the item rewritten to the new ids.
pub fn import_gallery(store: &dyn Store, doc: &str) -> Result<GalleryItem, StoreError> {
    let value: Value = serde_json::from_str(doc).map_err(|e| crate::schema::SchemaError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let is_item = value.get("payload").is_some() && value.get("kind").is_some();
    let item = if is_item {
        let mut raw: Value = value;
        let payload = raw.as_object_mut().and_then(|o| o.remove("payload")).unwrap_or_default();
        let bundle = parse_bundle(&payload.to_string()).map_err(|e| prefix_path(e, "payload"))?;
        raw["payload"] = serde_json::to_value(&bundle).expect("bundles serialize");
        from_value_with_path::<GalleryItem>(raw)?
    } else {
        let bundle = parse_bundle(doc)?;
        let Some(workflow) = &bundle.workflow else {
            return Err(StoreError::Unsupported(
                "a document without a workflow must be wrapped in a gallery item".into(),
            ));
        };
        GalleryItem {
            kind: EntityKind::Workflow,
            title: workflow.name.clone(),
            description: String::new(),
            version: default_item_version(),
            root: workflow.id.clone(),
            payload: bundle,
        }
    };

    let report = validate_bundle(&item.payload);
    if !report.ok {
        return Err(StoreError::Invalid {
            kind: item.kind,
            report,
        });
    }
    let root_present = match item.kind {
        EntityKind::Workflow => item.payload.workflow.as_ref().is_some_and(|w| w.id == item.root),
        EntityKind::Agent => item.payload.agents.iter().any(|a| a.id == item.root),
        EntityKind::Model => item.payload.models.iter().any(|m| m.id == item.root),
        EntityKind::Skill => item.payload.skills.iter().any(|s| s.id == item.root),
        EntityKind::Memory => item.payload.memories.iter().any(|m| m.id == item.root),
        EntityKind::Session => false,
    };
    if !root_present {
        return Err(StoreError::Unsupported(format!(
            "gallery item root {} `{}` is not in its payload",
            item.kind, item.root
        )));
    }

    let mut created: Vec<EntityRef> = Vec::new();
    match store_bundle(store, &item, &mut created) {
        Ok(item) => Ok(item),
        Err(e) => {
            for r in created.iter().rev() {
                let _ = store.delete(r.kind, &r.id, true);
            }
            Err(e)
        }
    }
}

fn prefix_path(e: crate::schema::SchemaError, prefix: &str) -> crate::schema::SchemaError {
    match e {
        crate::schema::SchemaError::Schema { path, message } => crate::schema::SchemaError::Schema {
            path: if path == "$" {
                prefix.to_string()
            } else {
                format!("{prefix}.{path}")
            },
            message,
        },
        other => other,
    }
}

fn store_bundle(store: &dyn Store, item: &GalleryItem, created: &mut Vec<EntityRef>) -> Result<GalleryItem, StoreError> {
    let b = &item.payload;
    let mut ids: BTreeMap<(EntityKind, String), String> = BTreeMap::new();
    let mut out = single(|_| {});
    out.version = b.version.clone();

    let mut put = |payload: Payload, old: &str, ids: &mut BTreeMap<(EntityKind, String), String>| {
        let kind = payload.kind();
        let entity = store.create(payload, Vec::new())?;
        created.push(EntityRef {
            kind,
            id: entity.id.clone(),
        });
        ids.insert((kind, old.to_string()), entity.id.clone());
        Ok::<Entity, StoreError>(entity)
    };
    let map = |ids: &BTreeMap<(EntityKind, String), String>, kind: EntityKind, id: &str| {
        ids.get(&(kind, id.to_string())).cloned().unwrap_or_else(|| id.to_string())
    };

    for m in &b.models {
        if let Payload::Model(m) = put(Payload::Model(m.clone()), &m.id, &mut ids)?.payload {
            out.models.push(m);
        }
    }
    for s in &b.skills {
        if let Payload::Skill(s) = put(Payload::Skill(s.clone()), &s.id, &mut ids)?.payload {
            out.skills.push(s);
        }
    }
    for m in &b.memories {
        if let Payload::Memory(m) = put(Payload::Memory(m.clone()), &m.id, &mut ids)?.payload {
            out.memories.push(m);
        }
    }
    let (groups, plain): (Vec<&AgentSpec>, Vec<&AgentSpec>) = b.agents.iter().partition(|a| a.is_group());
    for a in plain.into_iter().chain(groups) {
        let mut a2 = a.clone();
        a2.model_ref = a.model_ref.as_ref().map(|id| map(&ids, EntityKind::Model, id));
        a2.skill_refs = a.skill_refs.iter().map(|id| map(&ids, EntityKind::Skill, id)).collect();
        a2.memory_ref = a.memory_ref.as_ref().map(|id| map(&ids, EntityKind::Memory, id));
        a2.members = a.members.iter().map(|id| map(&ids, EntityKind::Agent, id)).collect();
        if let Payload::Agent(a) = put(Payload::Agent(a2), &a.id, &mut ids)?.payload {
            out.agents.push(a);
        }
    }
    if let Some(w) = &b.workflow {
        let mut w2 = w.clone();
        w2.initiator_ref = w.initiator_ref.as_ref().map(|id| map(&ids, EntityKind::Agent, id));
        w2.receiver_ref = w.receiver_ref.as_ref().map(|id| map(&ids, EntityKind::Agent, id));
        w2.sequence = w.sequence.iter().map(|id| map(&ids, EntityKind::Agent, id)).collect();
        if let Payload::Workflow(w) = put(Payload::Workflow(w2), &w.id, &mut ids)?.payload {
            out.workflow = Some(w);
        }
    }
    out.normalize();
    Ok(GalleryItem {
        kind: item.kind,
        title: item.title.clone(),
        description: item.description.clone(),
        version: item.version.clone(),
        root: map(&ids, item.kind, &item.root),
        payload: out,
    })
}
