//! The conversation loop shared by both patterns.

use std::sync::LazyLock;

use regex::Regex;

use super::context::build_request;
use super::speaker;
use super::{
    summarize, ArtifactEvent, CancelToken, EventBody, EventSink, HumanInput, HumanInputRequest,
    HumanReply, Message, MessageRole, RunContext, RunEvent, RunResult, RunStatus, ToolFinished,
    ToolStarted, WorkflowInstance, DEFAULT_AUTO_REPLY,
};
use crate::backend::ToolCall;
use crate::profiler::profile;
use crate::schema::{AgentSpec, AgentType, HumanInputMode, SkillLanguage};
use crate::tools::{FailureKind, ToolInvocation, ToolResult, ToolTarget};

/// Model-less turns allowed in a row before the chat is declared stalled.
const MAX_IDLE_TURNS: u32 = 100;

static CODE_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```").unwrap());

enum Stop {
    Keyword,
    MaxTurns,
    AwaitingHuman,
}

enum Abort {
    Failed { code: &'static str, message: String },
    Cancelled,
}

enum Turn {
    Completion { tool_calls: bool, keyword: bool },
    Human { keyword: bool },
    Idle,
    Pending,
}

pub(super) struct Runner<'a> {
    inst: &'a WorkflowInstance,
    sink: &'a dyn EventSink,
    input: &'a dyn HumanInput,
    cancel: CancelToken,
    history: &'a [Message],
    transcript: Vec<Message>,
    sequence: u64,
    completions: u32,
    warned: bool,
}

impl<'a> Runner<'a> {
    pub(super) fn new(inst: &'a WorkflowInstance, ctx: &'a RunContext<'_>, history: &'a [Message]) -> Self {
        Runner {
            inst,
            sink: ctx.sink,
            input: ctx.input,
            cancel: ctx.cancel.clone(),
            history,
            transcript: Vec::new(),
            sequence: 0,
            completions: 0,
            warned: false,
        }
    }

    pub(super) fn run_autonomous(mut self, task: &str) -> RunResult {
        let w = &self.inst.spec.workflow;
        let initiator = self.agent(w.initiator_ref.as_deref());
        let receiver = self.agent(w.receiver_ref.as_deref());
        let outcome = self.chat(initiator, receiver, task, true);
        self.finish(outcome, None)
    }

    pub(super) fn run_sequential(mut self, task: &str) -> RunResult {
        let proxy = self.implicit_proxy();
        let method = self.inst.spec.workflow.summary_method;
        let mut input = task.to_string();
        for id in &self.inst.spec.workflow.sequence {
            let agent = self.agent(Some(id));
            let start = self.transcript.len();
            match self.chat(&proxy, agent, &input, false) {
                Ok(Stop::Keyword | Stop::MaxTurns) => {}
                other => return self.finish(other, None),
            }
            let output = &self.transcript[start + 1..];
            if !output.is_empty() {
                input = summarize(output, method).expect("non-empty stage output");
            }
        }
        self.finish_with(Ok(RunStatus::Completed), Some(input))
    }

    fn agent(&self, id: Option<&str>) -> &'a AgentSpec {
        let inst = self.inst;
        id.and_then(|id| inst.agent(id)).expect("validated reference")
    }

    fn implicit_proxy(&self) -> AgentSpec {
        let taken = |name: &str| self.inst.agents.values().any(|a| a.name == name);
        let mut name = "user".to_string();
        let mut n = 1;
        while taken(&name) {
            name = format!("user_{n}");
            n += 1;
        }
        let mut proxy = AgentSpec::new("__user", AgentType::UserProxy, name);
        proxy.code_execution = false;
        proxy
    }

    fn keyword(&self) -> &'a str {
        let inst = self.inst;
        &inst.spec.workflow.termination.termination_keyword
    }

    fn emit(&mut self, body: EventBody) {
        let event = RunEvent {
            sequence: self.sequence,
            body,
        };
        self.sequence += 1;
        self.sink.emit(&event);
    }

    fn message(&self, sender: &str, recipient: &str, role: MessageRole, content: impl Into<String>) -> Message {
        Message {
            session_ref: self.inst.env.session_ref.clone(),
            turn_index: (self.history.len() + self.transcript.len()) as u64,
            ..Message::new(sender, recipient, role, content)
        }
    }

    fn record(&mut self, message: Message) {
        self.emit(EventBody::Message(message.clone()));
        self.transcript.push(message);
    }

    /// One exchange: `initiator` opens with `task` and turns alternate (or
    /// rotate through the group) until a stop condition.
    fn chat<'s>(
        &mut self,
        initiator: &'s AgentSpec,
        receiver: &'s AgentSpec,
        task: &str,
        with_history: bool,
    ) -> Result<Stop, Abort>
    where
        'a: 's,
    {
        let max_turns = self.inst.spec.workflow.termination.max_turns;
        let start = self.transcript.len();
        let group = receiver.is_group().then_some(receiver);
        self.record(self.message(&initiator.name, &receiver.name, MessageRole::User, task));

        let mut speaker = self.next_speaker(initiator, receiver, group, start, &initiator.name);
        let mut completions = 0u32;
        let mut streak = 0u32;
        let mut idle = 0u32;
        loop {
            if self.cancel.is_cancelled() {
                return Err(Abort::Cancelled);
            }
            let recipient = match group {
                Some(g) => g.name.clone(),
                None if speaker.name == receiver.name => initiator.name.clone(),
                None => receiver.name.clone(),
            };
            match self.turn(speaker, &recipient, start, with_history)? {
                Turn::Completion { tool_calls, keyword } => {
                    completions += 1;
                    self.completions += 1;
                    streak += 1;
                    idle = 0;
                    if keyword {
                        match self.on_termination(initiator, receiver)? {
                            Some(stop) => return Ok(stop),
                            None if completions >= max_turns => return Ok(Stop::MaxTurns),
                            None => {
                                streak = 0;
                                speaker = self.next_speaker(initiator, receiver, group, start, &initiator.name);
                                continue;
                            }
                        }
                    }
                    if completions >= max_turns {
                        return Ok(Stop::MaxTurns);
                    }
                    if tool_calls && streak < speaker.max_consecutive_replies {
                        continue;
                    }
                }
                Turn::Human { keyword } => {
                    if keyword {
                        return Ok(Stop::Keyword);
                    }
                    idle = 0;
                }
                Turn::Idle => {
                    idle += 1;
                    if idle >= MAX_IDLE_TURNS {
                        return Err(Abort::Failed {
                            code: "stalled",
                            message: format!("{MAX_IDLE_TURNS} turns in a row without a model completion"),
                        });
                    }
                }
                Turn::Pending => return Ok(Stop::AwaitingHuman),
            }
            streak = 0;
            let current = speaker.name.clone();
            speaker = self.next_speaker(initiator, receiver, group, start, &current);
        }
    }

    fn next_speaker<'s>(
        &self,
        initiator: &'s AgentSpec,
        receiver: &'s AgentSpec,
        group: Option<&AgentSpec>,
        start: usize,
        current: &str,
    ) -> &'s AgentSpec
    where
        'a: 's,
    {
        match group {
            Some(g) => speaker::select(self.inst, g, &self.transcript[start..]),
            None if current == receiver.name => initiator,
            None => receiver,
        }
    }

    fn on_termination(&mut self, initiator: &AgentSpec, receiver: &AgentSpec) -> Result<Option<Stop>, Abort> {
        if initiator.human_input_mode != HumanInputMode::OnTermination {
            return Ok(Some(Stop::Keyword));
        }
        if !self.input.interactive() {
            self.warn_degraded(initiator);
            return Ok(Some(Stop::Keyword));
        }
        match self.ask_human(initiator) {
            Ok(Some(text)) => {
                let keyword = text.contains(self.keyword());
                self.record(self.message(&initiator.name, &receiver.name, MessageRole::User, text));
                Ok(keyword.then_some(Stop::Keyword))
            }
            Ok(None) => Ok(Some(Stop::Keyword)),
            Err(Abort::Failed { code: PENDING, .. }) => Ok(Some(Stop::AwaitingHuman)),
            Err(e) => Err(e),
        }
    }

    /// `Ok(None)` for an empty reply. A pending source stops the run.
    fn ask_human(&mut self, agent: &AgentSpec) -> Result<Option<String>, Abort> {
        let request = HumanInputRequest {
            agent: agent.name.clone(),
            prompt: self.transcript.last().map(|m| m.content.clone()).unwrap_or_default(),
        };
        self.emit(EventBody::HumanInputRequested(request.clone()));
        match self.input.request(&request) {
            HumanReply::Text(t) if t.trim().is_empty() => Ok(None),
            HumanReply::Text(t) => Ok(Some(t)),
            HumanReply::Pending => Err(Abort::Failed {
                code: PENDING,
                message: String::new(),
            }),
            HumanReply::Cancelled => Err(Abort::Cancelled),
        }
    }

    fn warn_degraded(&mut self, agent: &AgentSpec) {
        if !self.warned {
            tracing::warn!(agent = %agent.name, "human input requested but the run is non-interactive; continuing without it");
            self.warned = true;
        }
    }

    fn turn(&mut self, agent: &AgentSpec, recipient: &str, start: usize, with_history: bool) -> Result<Turn, Abort> {
        if agent.human_input_mode == HumanInputMode::Always {
            if self.input.interactive() {
                match self.ask_human(agent) {
                    Ok(Some(text)) => {
                        let keyword = text.contains(self.keyword());
                        self.record(self.message(&agent.name, recipient, MessageRole::User, text));
                        return Ok(Turn::Human { keyword });
                    }
                    Ok(None) => {}
                    Err(Abort::Failed { code: PENDING, .. }) => return Ok(Turn::Pending),
                    Err(e) => return Err(e),
                }
            } else {
                self.warn_degraded(agent);
            }
        }
        if agent.model_ref.is_some() {
            self.complete(agent, recipient, start, with_history)
        } else {
            self.proxy_reply(agent, recipient, start);
            Ok(Turn::Idle)
        }
    }

    fn complete(&mut self, agent: &AgentSpec, recipient: &str, start: usize, with_history: bool) -> Result<Turn, Abort> {
        let inst = self.inst;
        let model_id = agent.model_ref.as_deref().expect("model-backed agent");
        let history: &[Message] = if with_history { self.history } else { &[] };
        let visible: Vec<&Message> = history.iter().chain(&self.transcript[start..]).collect();
        let recalled = agent
            .memory_ref
            .as_deref()
            .and_then(|id| inst.memories.get(id))
            .map(|m| m.lock().unwrap().recall())
            .unwrap_or_default();
        let request = build_request(inst, agent, &visible, &recalled);
        let backend = inst.backend(model_id).expect("instantiated backend");
        let completion = backend.complete(&request).map_err(|e| Abort::Failed {
            code: "backend_error",
            message: format!("agent `{}`: {e}", agent.name),
        })?;

        let mut calls = completion.tool_calls;
        for (i, call) in calls.iter_mut().enumerate() {
            if call.id.is_empty() {
                call.id = format!("call_{}_{i}", self.transcript.len());
            }
        }
        let keyword = completion.content.contains(self.keyword());
        let mut message = self.message(&agent.name, recipient, MessageRole::Assistant, completion.content);
        message.tool_calls = calls.clone();
        message.usage = Some(completion.usage);
        message.model = Some(request.model.model_name.clone());
        self.record(message);
        for call in &calls {
            self.run_tool(agent, call);
        }
        Ok(Turn::Completion {
            tool_calls: !calls.is_empty(),
            keyword,
        })
    }

    fn run_tool(&mut self, agent: &AgentSpec, call: &ToolCall) {
        let inst = self.inst;
        let skill = agent
            .skill_refs
            .iter()
            .filter_map(|id| inst.spec.skill(id))
            .find(|s| s.name == call.name);
        self.emit(EventBody::ToolStarted(ToolStarted {
            call_id: call.id.clone(),
            agent: agent.name.clone(),
            tool: call.name.clone(),
            arguments: call.arguments.clone(),
        }));
        let result = match skill {
            Some(skill) => inst.tools.execute(&ToolInvocation {
                target: ToolTarget::Skill { id: skill.id.clone() },
                arguments: call.arguments.clone(),
                session_workdir: inst.env.workdir.clone(),
                timeout_s: skill.timeout_s,
            }),
            None => ToolResult::spawn_error(format!(
                "agent `{}` has no skill named `{}`",
                agent.name, call.name
            )),
        };
        self.finish_tool(agent, &call.id, &call.name, &result);
        let mut message = self.message(&agent.name, &agent.name, MessageRole::Tool, format_tool_output(&result));
        message.tool_call_id = Some(call.id.clone());
        message.tool_result_ref = Some(result);
        self.record(message);
    }

    fn finish_tool(&mut self, agent: &AgentSpec, call_id: &str, tool: &str, result: &ToolResult) {
        self.emit(EventBody::ToolFinished(ToolFinished {
            call_id: call_id.to_string(),
            agent: agent.name.clone(),
            tool: tool.to_string(),
            result: result.clone(),
        }));
        for artifact in &result.artifacts {
            self.emit(EventBody::Artifact(ArtifactEvent {
                call_id: call_id.to_string(),
                agent: agent.name.clone(),
                artifact: artifact.clone(),
            }));
        }
    }

    /// A model-less agent runs the code blocks of the message it is
    /// answering (when allowed to), otherwise sends the default reply.
    fn proxy_reply(&mut self, agent: &AgentSpec, recipient: &str, start: usize) {
        let last = self.transcript[start..]
            .last()
            .filter(|m| m.role != MessageRole::Tool && m.sender != agent.name)
            .cloned();
        if let Some(last) = last.filter(|_| agent.code_execution) {
            let blocks = extract_code_blocks(&last.content);
            if !blocks.is_empty() {
                for (i, (language, source)) in blocks.into_iter().enumerate() {
                    let call_id = format!("code_{}_{i}", self.transcript.len());
                    let tool = match language {
                        SkillLanguage::Shell => "code:shell",
                        SkillLanguage::InterpretedScript => "code:script",
                    };
                    self.emit(EventBody::ToolStarted(ToolStarted {
                        call_id: call_id.clone(),
                        agent: agent.name.clone(),
                        tool: tool.to_string(),
                        arguments: Default::default(),
                    }));
                    let result = self.inst.tools.execute(&ToolInvocation {
                        target: ToolTarget::Inline { language, source },
                        arguments: Default::default(),
                        session_workdir: self.inst.env.workdir.clone(),
                        timeout_s: self.inst.env.code_timeout_s,
                    });
                    self.finish_tool(agent, &call_id, tool, &result);
                    let mut message =
                        self.message(&agent.name, &last.sender, MessageRole::Tool, format_code_output(&result));
                    message.tool_result_ref = Some(result);
                    self.record(message);
                }
                return;
            }
        }
        self.record(self.message(&agent.name, recipient, MessageRole::User, DEFAULT_AUTO_REPLY));
    }

    fn finish(self, outcome: Result<Stop, Abort>, summary: Option<String>) -> RunResult {
        let status = outcome.map(|stop| match stop {
            Stop::Keyword => RunStatus::TerminatedKeyword,
            Stop::MaxTurns => RunStatus::MaxTurnsReached,
            Stop::AwaitingHuman => RunStatus::AwaitingHuman,
        });
        self.finish_with(status, summary)
    }

    fn finish_with(mut self, status: Result<RunStatus, Abort>, summary: Option<String>) -> RunResult {
        let status = match status {
            Ok(status) => {
                self.emit(EventBody::RunFinished {
                    status,
                    turns: self.completions,
                });
                status
            }
            Err(Abort::Failed { code, message }) => {
                tracing::warn!(code, %message, "run failed");
                self.emit(EventBody::RunError {
                    code: code.to_string(),
                    message,
                });
                RunStatus::Error
            }
            Err(Abort::Cancelled) => {
                self.emit(EventBody::RunError {
                    code: "cancelled".into(),
                    message: "run was cancelled".into(),
                });
                RunStatus::Error
            }
        };
        self.remember();
        let mut final_message = self.transcript.last().cloned().expect("opening message");
        if let Some(summary) = summary {
            final_message.content = summary;
        }
        let profile = profile(&self.transcript, &self.inst.pricing());
        RunResult {
            status,
            final_message,
            transcript: self.transcript,
            profile,
        }
    }

    fn remember(&self) {
        for agent in self.inst.agents.values() {
            let Some(store) = agent.memory_ref.as_deref().and_then(|id| self.inst.memories.get(id)) else {
                continue;
            };
            let mut store = store.lock().unwrap();
            for m in &self.transcript {
                if m.role != MessageRole::Tool && (m.sender == agent.name || m.recipient == agent.name) {
                    store.remember(format!("{}: {}", m.sender, m.content));
                }
            }
        }
    }
}

const PENDING: &str = "pending";

/// Fenced blocks tagged `sh`, `bash`, `shell`, `python` or `py`, in order.
pub(super) fn extract_code_blocks(text: &str) -> Vec<(SkillLanguage, String)> {
    CODE_BLOCK
        .captures_iter(text)
        .filter_map(|c| {
            let language = match c[1].to_ascii_lowercase().as_str() {
                "sh" | "bash" | "shell" => SkillLanguage::Shell,
                "python" | "py" | "python3" => SkillLanguage::InterpretedScript,
                _ => return None,
            };
            Some((language, c[2].to_string()))
        })
        .collect()
}

fn format_tool_output(result: &ToolResult) -> String {
    if result.is_success() {
        let mut out = if result.stdout.is_empty() {
            "(no output)".to_string()
        } else {
            result.stdout.clone()
        };
        if !result.stderr.is_empty() {
            out.push_str("\n[stderr]\n");
            out.push_str(&result.stderr);
        }
        return out;
    }
    let reason = match result.failure_kind {
        Some(FailureKind::Timeout) => " (timed out)",
        Some(FailureKind::SpawnError) => " (could not start)",
        _ => "",
    };
    format!(
        "error: exit code {}{reason}\n{}{}",
        result.exit_code, result.stdout, result.stderr
    )
}

fn format_code_output(result: &ToolResult) -> String {
    let verdict = if result.is_success() {
        "execution succeeded"
    } else {
        "execution failed"
    };
    format!(
        "exitcode: {} ({verdict})\nCode output: {}{}",
        result.exit_code, result.stdout, result.stderr
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_blocks_by_language() {
        let text = "Run this:\n```bash\necho hi\n```\nand\n```python\nprint(1)\n```\n```text\nno\n```";
        let blocks = extract_code_blocks(text);
        assert_eq!(
            blocks,
            [
                (SkillLanguage::Shell, "echo hi\n".to_string()),
                (SkillLanguage::InterpretedScript, "print(1)\n".to_string())
            ]
        );
        assert!(extract_code_blocks("no code").is_empty());
    }
}
