//! Next-speaker selection for group chats.

use super::{Message, MessageRole, WorkflowInstance};
use crate::backend::{ChatMessage, ChatRequest, ChatRole};
use crate::schema::{AgentSpec, SpeakerSelection};

/// Round-robin over `members` (by name): the member after the last member
/// who spoke, or the first one when none has. A member never follows
/// itself while another member exists.
pub fn round_robin_index(members: &[&str], transcript: &[Message]) -> usize {
    let n = members.len();
    if n == 0 {
        return 0;
    }
    let spoken = transcript.iter().rev().filter(|m| m.role != MessageRole::Tool);
    let last_member = spoken
        .clone()
        .find_map(|m| members.iter().position(|name| *name == m.sender));
    let mut candidate = last_member.map_or(0, |i| (i + 1) % n);
    let previous = spoken.map(|m| m.sender.as_str()).next();
    if n > 1 && previous == Some(members[candidate]) {
        candidate = (candidate + 1) % n;
    }
    candidate
}

pub(super) fn select<'a>(inst: &'a WorkflowInstance, group: &AgentSpec, transcript: &[Message]) -> &'a AgentSpec {
    let members = inst.members(group);
    let names: Vec<&str> = members.iter().map(|m| m.name.as_str()).collect();
    if group.speaker_selection == SpeakerSelection::ModelSelected {
        if let Some(i) = ask_model(inst, group, &names, transcript) {
            return members[i];
        }
    }
    members[round_robin_index(&names, transcript)]
}

/// Asks the group's model to name the next speaker. The selection exchange
/// is not part of the transcript and does not count as a turn. `None` when
/// there is no model, the call fails or the reply names nobody.
fn ask_model(
    inst: &WorkflowInstance,
    group: &AgentSpec,
    names: &[&str],
    transcript: &[Message],
) -> Option<usize> {
    let model_id = group.model_ref.as_deref()?;
    let backend = inst.backend(model_id)?;
    let model = inst.spec.model(model_id)?.clone();
    let mut prompt = format!(
        "You coordinate a group chat between: {}. Read the conversation and reply with only the name of the agent who should speak next.",
        names.join(", ")
    );
    if !group.system_message.is_empty() {
        prompt = format!("{}\n\n{prompt}", group.system_message);
    }
    let mut messages = vec![ChatMessage::new(ChatRole::System, prompt)];
    messages.extend(transcript.iter().filter(|m| m.role != MessageRole::Tool).map(|m| ChatMessage {
        name: Some(m.sender.clone()),
        ..ChatMessage::new(ChatRole::User, m.content.clone())
    }));
    let req = ChatRequest {
        model,
        messages,
        tool_schemas: Vec::new(),
    };
    match backend.complete(&req) {
        Ok(c) => parse_choice(&c.content, names),
        Err(e) => {
            tracing::warn!(group = %group.id, error = %e, "speaker selection failed; using round robin");
            None
        }
    }
}

/// Exact name match first, otherwise the earliest name mentioned (longest
/// on ties).
pub(super) fn parse_choice(reply: &str, names: &[&str]) -> Option<usize> {
    let reply = reply.trim();
    if let Some(i) = names.iter().position(|n| *n == reply) {
        return Some(i);
    }
    names
        .iter()
        .enumerate()
        .filter_map(|(i, n)| reply.find(n).map(|at| (at, std::cmp::Reverse(n.len()), i)))
        .min()
        .map(|(_, _, i)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn choice_parsing() {
        let names = ["writer", "critic", "writer2"];
        assert_eq!(parse_choice(" critic\n", &names), Some(1));
        assert_eq!(parse_choice("I think writer2 should go", &names), Some(2));
        assert_eq!(parse_choice("critic, then writer", &names), Some(1));
        assert_eq!(parse_choice("nobody", &names), None);
    }
}
