//! Post-hoc run metrics.
//!
//! [`profile`] makes one pass over a transcript and counts, per agent:
//! messages sent, tokens consumed, dollar cost, and tool invocations split by
//! outcome. Tool outcomes are attributed to the agent that asked for the tool
//! (the recipient of the `tool` message). Cost comes from a [`PricingTable`]
//! keyed by `model_name`:
//!
//! ```text
//! cost = prompt_tokens / 1000 * prompt_per_1k + completion_tokens / 1000 * completion_per_1k
//! ```
//!
//! # Pricing file
//!
//! ```toml
//! [models."gpt-4o-mini"]
//! prompt_per_1k = 0.00015
//! completion_per_1k = 0.0006
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Message, MessageRole};
use crate::schema::{to_canonical_json, ModelConfig, ModelPricing};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub messages: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub tool_calls: u64,
    pub tool_success: u64,
    pub tool_failure: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub total_messages: u64,
    /// By agent name.
    pub per_agent: BTreeMap<String, AgentProfile>,
    pub total_cost: f64,
    /// Some usage was estimated, or some model had no price.
    pub estimated: bool,
    /// Time between the first and last message.
    pub duration_s: f64,
}

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("cannot read pricing file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid pricing file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("model `{0}` has a negative rate")]
    Negative(String),
}

/// Per-1k-token rates by `model_name`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PricingTable {
    #[serde(default)]
    models: BTreeMap<String, ModelPricing>,
}

impl PricingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PricingError> {
        let table: PricingTable = toml::from_str(text)?;
        for (name, p) in &table.models {
            if !(p.prompt_per_1k >= 0.0 && p.completion_per_1k >= 0.0) {
                return Err(PricingError::Negative(name.clone()));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PricingError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PricingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn insert(&mut self, model_name: impl Into<String>, prompt_per_1k: f64, completion_per_1k: f64) {
        self.models.insert(
            model_name.into(),
            ModelPricing {
                prompt_per_1k,
                completion_per_1k,
            },
        );
    }

    pub fn insert_if_absent(&mut self, model_name: &str, prompt_per_1k: f64, completion_per_1k: f64) {
        if !self.models.contains_key(model_name) {
            self.insert(model_name, prompt_per_1k, completion_per_1k);
        }
    }

    /// This table plus the rates declared on `models`. Entries already in
    /// the table win.
    pub fn with_models(&self, models: &[ModelConfig]) -> PricingTable {
        let mut table = self.clone();
        for model in models {
            if let Some(p) = &model.pricing {
                table.insert_if_absent(&model.model_name, p.prompt_per_1k, p.completion_per_1k);
            }
        }
        table
    }

    pub fn get(&self, model_name: &str) -> Option<&ModelPricing> {
        self.models.get(model_name)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

pub fn message_cost(prompt_tokens: u64, completion_tokens: u64, price: &ModelPricing) -> f64 {
    prompt_tokens as f64 / 1000.0 * price.prompt_per_1k
        + completion_tokens as f64 / 1000.0 * price.completion_per_1k
}

pub fn profile(transcript: &[Message], pricing: &PricingTable) -> ProfileReport {
    let mut report = ProfileReport::default();
    let mut first = None;
    let mut last = None;
    for m in transcript {
        report.total_messages += 1;
        report.per_agent.entry(m.sender.clone()).or_default().messages += 1;

        if let Some(usage) = &m.usage {
            let agent = report.per_agent.get_mut(&m.sender).expect("inserted above");
            agent.prompt_tokens += usage.prompt_tokens;
            agent.completion_tokens += usage.completion_tokens;
            report.estimated |= usage.usage_estimated;
            match m.model.as_deref().and_then(|name| pricing.get(name)) {
                Some(price) => agent.cost += message_cost(usage.prompt_tokens, usage.completion_tokens, price),
                None => report.estimated = true,
            }
        }

        if m.role == MessageRole::Tool {
            if let Some(result) = &m.tool_result_ref {
                let caller = report.per_agent.entry(m.recipient.clone()).or_default();
                caller.tool_calls += 1;
                if result.is_success() {
                    caller.tool_success += 1;
                } else {
                    caller.tool_failure += 1;
                }
            }
        }

        first = Some(first.map_or(m.created_at, |f: chrono::DateTime<chrono::Utc>| f.min(m.created_at)));
        last = Some(last.map_or(m.created_at, |l: chrono::DateTime<chrono::Utc>| l.max(m.created_at)));
    }
    report.total_cost = report.per_agent.values().map(|a| a.cost).sum();
    if let (Some(first), Some(last)) = (first, last) {
        report.duration_s = (last - first).num_microseconds().unwrap_or(0).max(0) as f64 / 1e6;
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Structured,
}

/// `Text` is an aligned table with one row per agent and a totals row;
/// `Structured` is canonical JSON of the report.
pub fn render_report(report: &ProfileReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => to_canonical_json(report),
        ReportFormat::Text => render_table(report),
    }
}

const HEADERS: [&str; 8] = [
    "agent",
    "messages",
    "prompt_tokens",
    "completion_tokens",
    "cost",
    "tool_calls",
    "tool_success",
    "tool_failure",
];

fn row(name: &str, a: &AgentProfile) -> [String; 8] {
    [
        name.to_string(),
        a.messages.to_string(),
        a.prompt_tokens.to_string(),
        a.completion_tokens.to_string(),
        format!("{:.6}", a.cost),
        a.tool_calls.to_string(),
        a.tool_success.to_string(),
        a.tool_failure.to_string(),
    ]
}

fn render_table(report: &ProfileReport) -> String {
    let mut totals = AgentProfile {
        messages: report.total_messages,
        cost: report.total_cost,
        ..AgentProfile::default()
    };
    for a in report.per_agent.values() {
        totals.prompt_tokens += a.prompt_tokens;
        totals.completion_tokens += a.completion_tokens;
        totals.tool_calls += a.tool_calls;
        totals.tool_success += a.tool_success;
        totals.tool_failure += a.tool_failure;
    }
    let mut rows: Vec<[String; 8]> = vec![HEADERS.map(String::from)];
    rows.extend(report.per_agent.iter().map(|(name, a)| row(name, a)));
    rows.push(row("TOTAL", &totals));

    let mut widths = [0usize; 8];
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for r in &rows {
        let mut line = String::new();
        for (i, cell) in r.iter().enumerate() {
            if i == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[i]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "duration: {:.3}s{}",
        report.duration_s,
        if report.estimated { " (estimated usage)" } else { "" }
    );
    out
}
