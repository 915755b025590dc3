//! Builds the chat request an agent sees.

use std::collections::BTreeSet;

use serde_json::json;

use super::{Message, MessageRole, WorkflowInstance};
use crate::backend::{estimate_tokens, ChatMessage, ChatRequest, ChatRole, ToolSchema};
use crate::schema::{AgentSpec, MemoryKind};

/// Turns the visible conversation into `agent`'s point of view: its own
/// messages become `assistant`, everyone else's `user` (named), and results
/// of its own tool calls `tool`. The oldest messages are dropped once the
/// estimated size exceeds the instance's context budget.
pub(super) fn build_request(
    inst: &WorkflowInstance,
    agent: &AgentSpec,
    visible: &[&Message],
    recalled: &[String],
) -> ChatRequest {
    let model_id = agent.model_ref.as_deref().expect("model-backed agent");
    let model = inst.spec.model(model_id).expect("validated reference").clone();

    let mut system = Vec::new();
    if !agent.system_message.is_empty() {
        system.push(ChatMessage::new(ChatRole::System, agent.system_message.clone()));
    }
    if !recalled.is_empty() {
        system.push(ChatMessage::new(
            ChatRole::System,
            format!("Notes from earlier conversations:\n{}", recalled.join("\n")),
        ));
    }

    let mut window: &[&Message] = visible;
    if let Some(memory) = agent.memory_ref.as_deref().and_then(|id| inst.spec.memory(id)) {
        if let (MemoryKind::ShortTermTranscript, Some(cap)) = (memory.kind, memory.capacity) {
            let cap = cap as usize;
            if window.len() > cap {
                window = &window[window.len() - cap..];
            }
        }
    }

    let mut convo: Vec<ChatMessage> = window.iter().map(|m| perspective(agent, m)).collect();

    let fixed: u64 = system.iter().map(|m| estimate_tokens(&m.content)).sum();
    let mut total: u64 = fixed + convo.iter().map(size).sum::<u64>();
    let mut drop = 0;
    while total > inst.env.max_context_tokens && convo.len() - drop > 1 {
        total -= size(&convo[drop]);
        drop += 1;
    }
    convo.drain(..drop);
    demote_orphans(&mut convo);

    let tool_schemas = agent
        .skill_refs
        .iter()
        .filter_map(|id| inst.spec.skill(id))
        .map(|s| ToolSchema {
            name: s.name.clone(),
            description: s.description.clone(),
            parameters: s
                .parameters
                .clone()
                .unwrap_or_else(|| json!({"type": "object", "properties": {}})),
        })
        .collect();

    system.extend(convo);
    ChatRequest {
        model,
        messages: system,
        tool_schemas,
    }
}

fn size(m: &ChatMessage) -> u64 {
    estimate_tokens(&m.content)
        + m.tool_calls
            .iter()
            .map(|c| estimate_tokens(&serde_json::Value::Object(c.arguments.clone()).to_string()))
            .sum::<u64>()
}

fn perspective(agent: &AgentSpec, m: &Message) -> ChatMessage {
    let own = m.sender == agent.name;
    match m.role {
        MessageRole::Tool if own && m.recipient == agent.name && m.tool_call_id.is_some() => ChatMessage {
            tool_call_id: m.tool_call_id.clone(),
            ..ChatMessage::new(ChatRole::Tool, m.content.clone())
        },
        _ if own => ChatMessage {
            tool_calls: m.tool_calls.clone(),
            ..ChatMessage::new(ChatRole::Assistant, m.content.clone())
        },
        _ => ChatMessage {
            name: Some(m.sender.clone()),
            ..ChatMessage::new(ChatRole::User, m.content.clone())
        },
    }
}

/// Tool results whose originating call is no longer in the window are
/// shown as plain user messages.
fn demote_orphans(convo: &mut [ChatMessage]) {
    let mut open: BTreeSet<String> = BTreeSet::new();
    for m in convo.iter_mut() {
        match m.role {
            ChatRole::Assistant => {
                open = m.tool_calls.iter().map(|c| c.id.clone()).collect();
            }
            ChatRole::Tool => {
                let known = m.tool_call_id.as_ref().is_some_and(|id| open.contains(id));
                if !known {
                    m.role = ChatRole::User;
                    m.tool_call_id = None;
                }
            }
            _ => open.clear(),
        }
    }
}
