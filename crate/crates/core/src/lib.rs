//! Declarative multi-agent workflows.
//!
//! `agentloom-core` holds everything that does not need a network listener:
//!
//! - [`schema`]: the workflow document format (models, skills, memories,
//!   agents, workflows), parsing, validation and canonical export.
//! - [`backend`]: chat-completion backends, an OpenAI-compatible HTTP client
//!   and a scripted mock.
//! - [`tools`]: sandboxed execution of skills and agent-authored code.
//! - [`engine`]: the workflow manager that instantiates agents and runs
//!   autonomous and sequential chats, streaming [`engine::RunEvent`]s.
//! - [`profiler`]: per-agent message, token, cost and tool metrics.
//! - [`store`]: durable CRUD storage for entities, sessions and messages,
//!   plus gallery import/export.
//!
//! ```
//! use agentloom_core::schema::{export_workflow, parse_workflow};
//!
//! let doc = r#"{
//!   "version": "1.0",
//!   "workflow": {"id": "wf", "name": "demo", "pattern": "autonomous_chat",
//!                "initiator_ref": "user", "receiver_ref": "helper"},
//!   "agents": [
//!     {"id": "user", "type": "user_proxy", "name": "user"},
//!     {"id": "helper", "type": "assistant", "name": "helper", "model_ref": "m"}
//!   ],
//!   "models": [{"id": "m", "name": "mock", "provider": "mock", "model_name": "mock-1",
//!               "script": {"steps": [{"content": "done TERMINATE"}]}}]
//! }"#;
//! let spec = parse_workflow(doc).unwrap();
//! assert_eq!(spec.workflow.termination.max_turns, 10);
//! let canonical = export_workflow(&spec).unwrap();
//! assert_eq!(parse_workflow(&canonical).unwrap(), spec);
//! ```

pub mod backend;
pub mod engine;
pub mod profiler;
pub mod schema;
pub mod store;
pub mod tools;

pub use backend::{estimate_tokens, ChatBackend, Completion, MockBackend, MockScript};
pub use engine::{instantiate, Message, RunEvent, RunResult, RunStatus, WorkflowInstance};
pub use profiler::{profile, PricingTable, ProfileReport};
pub use schema::{export_workflow, parse_workflow, validate, WorkflowSpec};

// The book's Rust snippets are compiled and run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/documents.md")]
    mod documents {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/group-chat.md")]
    mod group_chat {}
    #[doc = include_str!("../../../book/src/skills.md")]
    mod skills {}
    #[doc = include_str!("../../../book/src/profiling.md")]
    mod profiling {}
    #[doc = include_str!("../../../book/src/storage.md")]
    mod storage {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
