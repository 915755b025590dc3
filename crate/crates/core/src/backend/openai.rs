use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{
    estimate_tokens, BackendError, ChatBackend, ChatMessage, ChatRequest, ChatRole, Completion,
    EnvLookup, ToolCall, Usage,
};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Retries apply to transport failures and 5xx responses only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 2,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.pow(attempt)
    }
}

/// Client for the chat-completions wire format spoken by OpenAI and the many
/// servers that imitate it.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key_ref: Option<String>,
    env: EnvLookup,
    retry: RetryPolicy,
}

impl OpenAiBackend {
    pub fn new(base_url: Option<&str>, api_key_ref: Option<String>, env: EnvLookup) -> Self {
        let base = base_url.unwrap_or(DEFAULT_BASE_URL).trim_end_matches('/');
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        OpenAiBackend {
            agent,
            endpoint: format!("{base}/chat/completions"),
            api_key_ref,
            env,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn send_once(&self, body: &Value) -> Result<Completion, BackendError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(var) = &self.api_key_ref {
            let key = (self.env)(var).ok_or_else(|| BackendError::MissingCredential(var.clone()))?;
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| BackendError::Transport {
            status: None,
            message: e.to_string(),
            retryable: true,
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport {
                status: Some(status),
                message: e.to_string(),
                retryable: true,
            })?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Transport {
                status: Some(status),
                message: truncate(&text, 512),
                retryable: status >= 500,
            });
        }
        parse_response(&text, body)
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let body = request_body(req);
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Err(BackendError::Transport { retryable: true, .. })
                    if attempt + 1 < self.retry.max_attempts =>
                {
                    thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

fn role_str(role: ChatRole) -> &'static str {
    match role {
        ChatRole::System => "system",
        ChatRole::User => "user",
        ChatRole::Assistant => "assistant",
        ChatRole::Tool => "tool",
    }
}

fn message_json(m: &ChatMessage) -> Value {
    let mut obj = Map::new();
    obj.insert("role".into(), json!(role_str(m.role)));
    obj.insert("content".into(), json!(m.content));
    if let Some(name) = &m.name {
        obj.insert("name".into(), json!(sanitize_name(name)));
    }
    if !m.tool_calls.is_empty() {
        let calls: Vec<Value> = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": {
                        "name": c.name,
                        "arguments": Value::Object(c.arguments.clone()).to_string(),
                    }
                })
            })
            .collect();
        obj.insert("tool_calls".into(), Value::Array(calls));
    }
    if let Some(id) = &m.tool_call_id {
        obj.insert("tool_call_id".into(), json!(id));
    }
    Value::Object(obj)
}

// The wire format restricts `name` to [A-Za-z0-9_-].
fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .take(64)
        .collect()
}

pub(crate) fn request_body(req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": req.model.model_name,
        "messages": req.messages.iter().map(message_json).collect::<Vec<_>>(),
        "temperature": req.model.temperature,
        "max_tokens": req.model.max_tokens,
    });
    if !req.tool_schemas.is_empty() {
        body["tools"] = req
            .tool_schemas
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
    }
    body
}

fn parse_response(text: &str, request: &Value) -> Result<Completion, BackendError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")))?;
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message".into()))?;
    let content = match message.get("content") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => {
            return Err(BackendError::Malformed(format!(
                "message.content is not a string: {other}"
            )))
        }
    };
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").filter(|c| !c.is_null()) {
        let calls = calls
            .as_array()
            .ok_or_else(|| BackendError::Malformed("tool_calls is not an array".into()))?;
        for (i, call) in calls.iter().enumerate() {
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Malformed(format!("tool_calls[{i}] has no function name")))?;
            let id = call
                .get("id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("call_{i}"));
            let arguments = match call.pointer("/function/arguments") {
                None | Some(Value::Null) => Map::new(),
                Some(Value::String(raw)) if raw.trim().is_empty() => Map::new(),
                Some(Value::String(raw)) => match serde_json::from_str::<Value>(raw) {
                    Ok(Value::Object(map)) => map,
                    Ok(other) => Map::from_iter([("input".to_string(), other)]),
                    Err(_) => Map::from_iter([("input".to_string(), Value::String(raw.clone()))]),
                },
                Some(Value::Object(map)) => map.clone(),
                Some(other) => Map::from_iter([("input".to_string(), other.clone())]),
            };
            tool_calls.push(ToolCall {
                id,
                name: name.to_string(),
                arguments,
            });
        }
    }
    let reported = v.get("usage").and_then(|u| {
        Some((
            u.get("prompt_tokens")?.as_u64()?,
            u.get("completion_tokens")?.as_u64()?,
        ))
    });
    let usage = match reported {
        Some((prompt_tokens, completion_tokens)) => Usage {
            prompt_tokens,
            completion_tokens,
            usage_estimated: false,
        },
        None => {
            let prompt: u64 = request["messages"]
                .as_array()
                .map(|ms| {
                    ms.iter()
                        .map(|m| estimate_tokens(m["content"].as_str().unwrap_or("")))
                        .sum()
                })
                .unwrap_or(0);
            Usage {
                prompt_tokens: prompt,
                completion_tokens: estimate_tokens(&content),
                usage_estimated: true,
            }
        }
    };
    Ok(Completion {
        content,
        tool_calls,
        usage,
    })
}
