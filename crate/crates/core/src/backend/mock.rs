use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendError, ChatBackend, ChatRequest, Completion, ToolCall, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustedBehavior {
    #[default]
    RepeatLast,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One scripted reply. Usage is estimated unless given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockStep {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<MockUsage>,
}

impl MockStep {
    pub fn text(content: impl Into<String>) -> Self {
        MockStep {
            content: content.into(),
            tool_calls: Vec::new(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub steps: Vec<MockStep>,
    #[serde(default)]
    pub exhausted_behavior: ExhaustedBehavior,
}

impl MockScript {
    pub fn new(steps: Vec<MockStep>) -> Self {
        MockScript {
            steps,
            exhausted_behavior: ExhaustedBehavior::RepeatLast,
        }
    }

    pub fn replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MockScript::new(replies.into_iter().map(MockStep::text).collect())
    }
}

#[derive(Debug, Default)]
struct MockState {
    next: usize,
    calls: Vec<ChatRequest>,
}

/// Deterministic backend that replays a script and records every request.
///
/// Step consumption is serialized, so concurrent callers observe one
/// consistent step sequence.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            state: Mutex::new(MockState::default()),
        }
    }

    /// Requests received so far, in call order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().calls.len()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let mut state = self.state.lock().unwrap();
        let steps = &self.script.steps;
        let index = state.next;
        let step = match steps.get(index) {
            Some(step) => step,
            None => match self.script.exhausted_behavior {
                ExhaustedBehavior::RepeatLast if !steps.is_empty() => &steps[steps.len() - 1],
                _ => return Err(BackendError::ScriptExhausted(steps.len())),
            },
        };
        state.next += 1;
        state.calls.push(req.clone());

        let tool_calls: Vec<ToolCall> = step
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, call)| {
                let mut call = call.clone();
                if call.id.is_empty() {
                    call.id = format!("call_{index}_{i}");
                }
                call
            })
            .collect();
        let usage = match &step.usage {
            Some(u) => Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                usage_estimated: false,
            },
            None => {
                let args: u64 = tool_calls
                    .iter()
                    .map(|c| estimate_tokens(&serde_json::to_string(&c.arguments).unwrap()))
                    .sum();
                Usage {
                    prompt_tokens: req.estimated_prompt_tokens(),
                    completion_tokens: estimate_tokens(&step.content) + args,
                    usage_estimated: true,
                }
            }
        };
        Ok(Completion {
            content: step.content.clone(),
            tool_calls,
            usage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatMessage, ChatRole};
    use crate::schema::{ModelConfig, Provider};

    fn request(text: &str) -> ChatRequest {
        ChatRequest {
            model: ModelConfig {
                id: "m".into(),
                name: "mock".into(),
                provider: Provider::Mock,
                base_url: None,
                api_key_ref: None,
                model_name: "mock-1".into(),
                temperature: 0.0,
                max_tokens: 64,
                pricing: None,
                script: None,
            },
            messages: vec![ChatMessage::new(ChatRole::User, text)],
            tool_schemas: Vec::new(),
        }
    }

    #[test]
    fn scripted_echo_is_verbatim_with_estimated_usage() {
        let mock = MockBackend::new(MockScript::replies(["TERMINATE"]));
        let c = mock.complete(&request("hello world!")).unwrap();
        assert_eq!(c.content, "TERMINATE");
        assert!(c.tool_calls.is_empty());
        assert!(c.usage.usage_estimated);
        assert_eq!(c.usage.prompt_tokens, 3);
        assert_eq!(c.usage.completion_tokens, 3);
    }

    #[test]
    fn repeat_last_after_exhaustion() {
        let mock = MockBackend::new(MockScript::replies(["one", "two"]));
        let req = request("x");
        let got: Vec<String> = (0..3).map(|_| mock.complete(&req).unwrap().content).collect();
        assert_eq!(got, ["one", "two", "two"]);
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn exhausted_error_behavior() {
        let mut script = MockScript::replies(["only"]);
        script.exhausted_behavior = ExhaustedBehavior::Error;
        let mock = MockBackend::new(script);
        let req = request("x");
        mock.complete(&req).unwrap();
        assert!(matches!(mock.complete(&req), Err(BackendError::ScriptExhausted(1))));
    }

    #[test]
    fn explicit_usage_is_reported_as_real() {
        let mock = MockBackend::new(MockScript::new(vec![MockStep {
            content: "ok".into(),
            tool_calls: vec![],
            usage: Some(MockUsage {
                prompt_tokens: 1000,
                completion_tokens: 500,
            }),
        }]));
        let c = mock.complete(&request("x")).unwrap();
        assert_eq!(
            c.usage,
            Usage {
                prompt_tokens: 1000,
                completion_tokens: 500,
                usage_estimated: false
            }
        );
    }

    #[test]
    fn identical_state_and_request_give_identical_completion() {
        let script = MockScript::replies(["a", "b"]);
        let (m1, m2) = (MockBackend::new(script.clone()), MockBackend::new(script));
        let req = request("same");
        for _ in 0..3 {
            assert_eq!(m1.complete(&req).unwrap(), m2.complete(&req).unwrap());
        }
    }

    #[test]
    fn concurrent_callers_see_each_step_once() {
        let mut script = MockScript::replies((0..64).map(|i| i.to_string()));
        script.exhausted_behavior = ExhaustedBehavior::Error;
        let mock = std::sync::Arc::new(MockBackend::new(script));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let mock = mock.clone();
                std::thread::spawn(move || {
                    (0..8)
                        .map(|_| mock.complete(&request("x")).unwrap().content)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<u32> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .map(|s| s.parse().unwrap())
            .collect();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }
}
