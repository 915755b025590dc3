//! Chat-completion backends.
//!
//! Every backend implements [`ChatBackend`]: one request in, exactly one
//! [`Completion`] out. Usage is always populated; when the provider does
//! not report it, token counts come from [`estimate_tokens`] and
//! `usage_estimated` is set.

mod mock;
mod openai;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::ModelConfig;

pub use mock::{ExhaustedBehavior, MockBackend, MockScript, MockStep, MockUsage};
pub use openai::{OpenAiBackend, RetryPolicy, DEFAULT_BASE_URL};

/// Looks up environment variables; injectable so tests need not touch the
/// process environment.
pub type EnvLookup = Arc<dyn Fn(&str) -> Option<String> + Send + Sync>;

/// The process environment.
pub fn process_env() -> EnvLookup {
    Arc::new(|name| std::env::var(name).ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
            name: None,
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: ModelConfig,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub tool_schemas: Vec<ToolSchema>,
}

impl ChatRequest {
    /// Estimated prompt size of the request.
    pub fn estimated_prompt_tokens(&self) -> u64 {
        self.messages
            .iter()
            .map(|m| {
                let args: u64 = m
                    .tool_calls
                    .iter()
                    .map(|c| estimate_tokens(&Value::Object(c.arguments.clone()).to_string()))
                    .sum();
                estimate_tokens(&m.content) + args
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub usage_estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure ({}): {message}", status.map_or_else(|| "no status".to_string(), |s| format!("HTTP {s}")))]
    Transport {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("mock script exhausted after {0} steps")]
    ScriptExhausted(usize),
    #[error("environment variable `{0}` is not set")]
    MissingCredential(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError>;
}

/// Token estimate used when a provider reports no usage: one token per four
/// bytes of UTF-8, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}
