//! Acceptance suite. Prints one `ACCEPTANCE <name>: PASS|FAIL` line per
//! criterion and exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use agentloom_core::backend::Usage;
use agentloom_core::engine::{
    instantiate, EventBody, EventLog, Message, MessageRole, RunContext, RunStatus, RuntimeEnv, DEFAULT_AUTO_REPLY,
};
use agentloom_core::profiler::{profile, PricingTable};
use agentloom_core::schema::{export_workflow, parse_workflow, AgentType, SkillLanguage, SkillSpec};
use agentloom_core::tools::{
    FailureKind, MediaKind, Sandbox, SandboxConfig, SkillRegistry, ToolInvocation, ToolResult, ToolRuntime,
    ToolStatus, ToolTarget,
};
use agentloom_server::ServerConfig;
use chrono::{TimeZone, Utc};
use common::{golden, normalize, Cli, InProcess};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("termination", termination),
        ("stream-persistence-coherence", coherence),
        ("profiler-oracle", profiler_oracle),
        ("spec-round-trip", round_trip),
        ("tool-sandbox", tool_sandbox),
        ("persona-end-to-end", persona),
        ("crud-laws", crud_laws),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(()) => println!("ACCEPTANCE {name}: PASS"),
            Err(reason) => {
                failed += 1;
                println!("ACCEPTANCE {name}: FAIL");
                eprintln!("  {name}: {reason}");
            }
        }
        eprintln!("  {name} took {:.2}s", start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- termination

const KEYWORDS: [&str; 4] = ["TERMINATE", "DONE", "<END>", "STOP!"];
const WORDS: [&str; 8] = ["draft ready", "looks good", "revise part two", "ok", "terminal", "Terminate", "DON", "END"];

fn random_reply(rng: &mut StdRng, keyword: &str) -> String {
    let base = *WORDS.choose(rng).unwrap();
    match rng.random_range(0..7) {
        0 => format!("{keyword} {base}"),
        1 => format!("{base} {keyword}"),
        2 => {
            let (a, b) = base.split_at(base.len() / 2);
            format!("{a}{keyword}{b}")
        }
        3 => format!("{base} {}", keyword.to_lowercase()),
        _ => base.to_string(),
    }
}

fn mock_model(id: &str, replies: &[String]) -> Value {
    let steps: Vec<Value> = replies.iter().map(|r| json!({ "content": r })).collect();
    json!({"id": id, "name": id, "provider": "mock", "model_name": format!("{id}-v1"), "script": {"steps": steps}})
}

/// Hand-written model of the conversation loop. Returns the expected
/// `(sender, content)` transcript, status and turn count.
fn loop_oracle(
    task: &str,
    initiator: (&str, Option<&[String]>),
    receiver: (&str, &[String]),
    keyword: &str,
    max_turns: u32,
) -> (Vec<(String, String)>, RunStatus, u32) {
    let pick = |script: &[String], i: usize| script[i.min(script.len() - 1)].clone();
    let mut transcript = vec![(initiator.0.to_string(), task.to_string())];
    let (mut ri, mut ii, mut turns) = (0usize, 0usize, 0u32);
    let mut receiver_speaks = true;
    loop {
        let (who, reply) = if receiver_speaks {
            ri += 1;
            (receiver.0, pick(receiver.1, ri - 1))
        } else {
            match initiator.1 {
                Some(script) => {
                    ii += 1;
                    (initiator.0, pick(script, ii - 1))
                }
                None => {
                    transcript.push((initiator.0.to_string(), DEFAULT_AUTO_REPLY.to_string()));
                    receiver_speaks = true;
                    continue;
                }
            }
        };
        transcript.push((who.to_string(), reply.clone()));
        turns += 1;
        if reply.contains(keyword) {
            return (transcript, RunStatus::TerminatedKeyword, turns);
        }
        if turns >= max_turns {
            return (transcript, RunStatus::MaxTurnsReached, turns);
        }
        receiver_speaks = !receiver_speaks;
    }
}

fn termination() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x7e3a_11);
    let start = Instant::now();
    let mut statuses = BTreeSet::new();
    for case in 0..50 {
        let keyword = *KEYWORDS.choose(&mut rng).unwrap();
        let max_turns: u32 = rng.random_range(1..=10);
        let with_proxy = rng.random_bool(0.5);
        let script = |rng: &mut StdRng| -> Vec<String> {
            (0..rng.random_range(1..6)).map(|_| random_reply(rng, keyword)).collect()
        };
        let receiver = script(&mut rng);
        let initiator = script(&mut rng);
        let task = format!("task number {case}");

        let mut agents = vec![json!({"id": "b", "type": "assistant", "name": "b", "model_ref": "mb"})];
        let mut models = vec![mock_model("mb", &receiver)];
        if with_proxy {
            agents.push(json!({"id": "a", "type": "user_proxy", "name": "a"}));
        } else {
            agents.push(json!({"id": "a", "type": "assistant", "name": "a", "model_ref": "ma"}));
            models.push(mock_model("ma", &initiator));
        }
        let doc = json!({
            "version": "1.0",
            "workflow": {"id": "wf", "name": "pair", "pattern": "autonomous_chat",
                         "initiator_ref": "a", "receiver_ref": "b",
                         "termination": {"max_turns": max_turns, "termination_keyword": keyword}},
            "agents": agents,
            "models": models
        });
        let spec = parse_workflow(&doc.to_string()).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let inst = instantiate(&spec, RuntimeEnv::new(dir.path().join("scratch"))).map_err(|e| e.to_string())?;
        let log = EventLog::new();
        let result = inst.execute(&task, &[], &RunContext::new(&log)).map_err(|e| e.to_string())?;

        let init_script = (!with_proxy).then_some(initiator.as_slice());
        let (expected, status, turns) = loop_oracle(&task, ("a", init_script), ("b", &receiver), keyword, max_turns);
        let actual: Vec<(String, String)> = result
            .transcript
            .iter()
            .map(|m| (m.sender.clone(), m.content.clone()))
            .collect();
        ensure!(result.status == status, "case {case}: status {:?}, oracle {status:?}", result.status);
        ensure!(actual == expected, "case {case}: transcript {actual:?}, oracle {expected:?}");
        let last = log.events().pop().map(|e| e.body);
        ensure!(
            last == Some(EventBody::RunFinished { status, turns }),
            "case {case}: final event {last:?}, oracle {status:?} after {turns} turns"
        );
        statuses.insert(format!("{status:?}"));
    }
    ensure!(statuses.len() == 2, "randomization only reached {statuses:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(())
}

// ----------------------------------------------------------------- coherence

const COHERENCE_FIXTURES: [&str; 20] = [
    "01-minimal-pair",
    "02-custom-termination",
    "03-sequential-last-message",
    "04-sequential-truncated",
    "05-group-round-robin",
    "06-group-model-selected",
    "07-book-generation",
    "09-skill-parameters",
    "10-interpreted-script",
    "12-naive-store-memory",
    "16-unicode",
    "17-two-models",
    "18-proxy-without-execution",
    "19-assistant-executes",
    "20-skill-env",
    "21-tool-call-script",
    "22-exhausted-error",
    "23-consecutive-replies",
    "24-travel-planning",
    "25-kitchen-sink",
];

fn canonical(v: Value) -> String {
    serde_json::to_string(&normalize(v)).expect("values serialize")
}

fn coherence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // nobody answers human input requests here
    let config = ServerConfig {
        human_input_timeout: Duration::from_millis(100),
        ..ServerConfig::default()
    };
    let srv = InProcess::start(dir.path(), config);
    let mut tool_runs = 0;
    for name in COHERENCE_FIXTURES {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(golden(name)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let (status, v) = common::post(&srv.url("/api/gallery/import"), doc);
        ensure!(status == 201, "{name}: import returned {status}: {v}");
        let workflow = v["data"]["root"].as_str().unwrap_or_default().to_string();
        let (status, v) = common::post(&srv.url("/api/sessions"), json!({"workflow_ref": workflow, "name": name}));
        ensure!(status == 201, "{name}: session returned {status}: {v}");
        let session = v["data"]["id"].as_str().unwrap_or_default().to_string();

        let mut ws = srv.subscribe(&session);
        let (status, run) = common::post(&srv.url(&format!("/api/sessions/{session}/run")), json!({"task": "begin"}));
        ensure!(status == 200, "{name}: run returned {status}: {run}");
        let frames = ws.until_terminal();
        let (_, history) = common::get(&srv.url(&format!("/api/sessions/{session}/messages")));

        let streamed: Vec<Value> = frames
            .iter()
            .filter(|f| f["kind"] == "message")
            .map(|f| f["payload"].clone())
            .collect();
        let streamed = canonical(Value::Array(streamed));
        let persisted = canonical(history["data"].clone());
        let transcript = canonical(run["data"]["transcript"].clone());
        ensure!(streamed == persisted, "{name}: stream and history differ\n{streamed}\n{persisted}");
        ensure!(persisted == transcript, "{name}: history and transcript differ\n{persisted}\n{transcript}");
        let sequences: Vec<u64> = frames.iter().filter_map(|f| f["sequence"].as_u64()).collect();
        ensure!(
            sequences == (0..frames.len() as u64).collect::<Vec<_>>(),
            "{name}: sequences {sequences:?}"
        );
        if frames.iter().any(|f| f["kind"] == "tool_finished") {
            tool_runs += 1;
        }
    }
    ensure!(tool_runs >= 1, "no fixture exercised a tool");
    srv.stop();
    Ok(())
}

// ------------------------------------------------------------------ profiler

/// Rates from `tests/fixtures/pricing.toml`, restated.
fn fixture_rate(model: &str) -> Option<(f64, f64)> {
    match model {
        "alpha-v1" => Some((0.5, 1.5)),
        "beta-v1" => Some((0.01, 0.03)),
        "m-v1" => Some((0.01, 0.03)),
        _ => None,
    }
}

fn tool_result(success: bool) -> ToolResult {
    ToolResult {
        status: if success { ToolStatus::Success } else { ToolStatus::Failure },
        exit_code: if success { 0 } else { 1 },
        stdout: String::new(),
        stderr: String::new(),
        duration_s: 0.01,
        artifacts: Vec::new(),
        failure_kind: (!success).then_some(FailureKind::NonzeroExit),
    }
}

fn random_transcript(rng: &mut StdRng) -> Vec<Message> {
    let agents = ["writer", "critic", "user", "planner"];
    let models = ["alpha-v1", "beta-v1", "gamma-v1"];
    let t0 = Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap();
    (0..rng.random_range(0..=50))
        .map(|_| {
            let role = *[MessageRole::User, MessageRole::Assistant, MessageRole::Tool].choose(rng).unwrap();
            let mut m = Message::new(*agents.choose(rng).unwrap(), *agents.choose(rng).unwrap(), role, "x");
            m.created_at = t0 + chrono::Duration::milliseconds(rng.random_range(0..600_000));
            match role {
                MessageRole::Tool if rng.random_bool(0.9) => m.tool_result_ref = Some(tool_result(rng.random_bool(0.6))),
                MessageRole::Assistant | MessageRole::User if rng.random_bool(0.8) => {
                    m.usage = Some(Usage {
                        prompt_tokens: rng.random_range(0..5000),
                        completion_tokens: rng.random_range(0..2000),
                        usage_estimated: rng.random_bool(0.15),
                    });
                    m.model = rng.random_bool(0.9).then(|| models.choose(rng).unwrap().to_string());
                }
                _ => {}
            }
            m
        })
        .collect()
}

#[derive(Debug, Default, PartialEq)]
struct Recount {
    messages: u64,
    prompt: u64,
    completion: u64,
    cost: f64,
    calls: u64,
    success: u64,
    failure: u64,
}

/// Field-by-field recount, one filter per metric.
fn naive_recount(t: &[Message]) -> (BTreeMap<String, Recount>, f64, bool, f64) {
    let mut names: BTreeSet<String> = t.iter().map(|m| m.sender.clone()).collect();
    names.extend(
        t.iter()
            .filter(|m| m.role == MessageRole::Tool && m.tool_result_ref.is_some())
            .map(|m| m.recipient.clone()),
    );
    let mut per = BTreeMap::new();
    for name in names {
        let sent = || t.iter().filter(|m| m.sender == name);
        let answered = || {
            t.iter()
                .filter(|m| m.role == MessageRole::Tool && m.recipient == name)
                .filter_map(|m| m.tool_result_ref.as_ref())
        };
        let r = Recount {
            messages: sent().count() as u64,
            prompt: sent().filter_map(|m| m.usage.as_ref()).map(|u| u.prompt_tokens).sum(),
            completion: sent().filter_map(|m| m.usage.as_ref()).map(|u| u.completion_tokens).sum(),
            cost: sent()
                .filter_map(|m| {
                    let u = m.usage.as_ref()?;
                    let (p, c) = fixture_rate(m.model.as_deref()?)?;
                    Some(u.prompt_tokens as f64 * p / 1000.0 + u.completion_tokens as f64 * c / 1000.0)
                })
                .sum(),
            calls: answered().count() as u64,
            success: answered().filter(|r| r.status == ToolStatus::Success).count() as u64,
            failure: answered().filter(|r| r.status == ToolStatus::Failure).count() as u64,
        };
        per.insert(name, r);
    }
    let total = per.values().map(|r| r.cost).sum();
    let estimated = t.iter().filter_map(|m| m.usage.as_ref().map(|u| (m, u))).any(|(m, u)| {
        u.usage_estimated || m.model.as_deref().and_then(fixture_rate).is_none()
    });
    let duration = match (t.iter().map(|m| m.created_at).min(), t.iter().map(|m| m.created_at).max()) {
        (Some(a), Some(b)) => (b - a).num_milliseconds() as f64 / 1000.0,
        _ => 0.0,
    };
    (per, total, estimated, duration)
}

fn profiler_oracle() -> Outcome {
    let pricing = PricingTable::load(common::fixture("pricing.toml")).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(0x9e0f);
    for case in 0..100 {
        let t = random_transcript(&mut rng);
        let report = profile(&t, &pricing);
        let (per, total, estimated, duration) = naive_recount(&t);
        ensure!(report.total_messages == t.len() as u64, "case {case}: total_messages");
        let got: Vec<&String> = report.per_agent.keys().collect();
        let want: Vec<&String> = per.keys().collect();
        ensure!(got == want, "case {case}: agents {got:?} vs {want:?}");
        for (name, r) in &per {
            let a = &report.per_agent[name];
            let fields = (a.messages, a.prompt_tokens, a.completion_tokens, a.tool_calls, a.tool_success, a.tool_failure);
            let expected = (r.messages, r.prompt, r.completion, r.calls, r.success, r.failure);
            ensure!(fields == expected, "case {case}, {name}: {fields:?} vs {expected:?}");
            ensure!((a.cost - r.cost).abs() < 1e-9, "case {case}, {name}: cost {} vs {}", a.cost, r.cost);
        }
        ensure!((report.total_cost - total).abs() < 1e-9, "case {case}: total cost");
        ensure!(report.estimated == estimated, "case {case}: estimated flag");
        ensure!((report.duration_s - duration).abs() < 1e-9, "case {case}: duration");
    }

    // hand-computed costs
    let priced = |sender: &str, model: &str, prompt: u64, completion: u64| {
        let mut m = Message::new(sender, "other", MessageRole::Assistant, "text");
        m.usage = Some(Usage {
            prompt_tokens: prompt,
            completion_tokens: completion,
            usage_estimated: false,
        });
        m.model = Some(model.into());
        m
    };
    let one = profile(&[priced("writer", "beta-v1", 1000, 500)], &pricing);
    ensure!((one.total_cost - 0.025).abs() < 1e-9, "1000/500 at beta rates: {}", one.total_cost);
    let t = [
        priced("writer", "alpha-v1", 1000, 500),
        priced("writer", "beta-v1", 1000, 500),
        priced("critic", "beta-v1", 1234, 567),
    ];
    let report = profile(&t, &pricing);
    // 0.5 + 0.75, plus 0.01 + 0.015
    ensure!((report.per_agent["writer"].cost - 1.275).abs() < 1e-9, "writer cost");
    // 0.01234 + 0.01701
    ensure!((report.per_agent["critic"].cost - 0.02935).abs() < 1e-9, "critic cost");
    ensure!((report.total_cost - 1.30435).abs() < 1e-9, "total {}", report.total_cost);
    ensure!(!report.estimated, "fully priced transcript flagged as estimated");
    Ok(())
}

// ----------------------------------------------------------------- round trip

fn round_trip() -> Outcome {
    let dir = common::fixture("golden");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    ensure!(files.len() == 25, "expected 25 golden documents, found {}", files.len());
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy();
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let spec = parse_workflow(&text).map_err(|e| format!("{name}: {e}"))?;
        let exported = export_workflow(&spec).map_err(|e| format!("{name}: {e}"))?;
        ensure!(exported == text, "{name}: export differs from the golden bytes");
        let again = parse_workflow(&exported).map_err(|e| format!("{name}: {e}"))?;
        ensure!(again == spec, "{name}: reparse differs");
    }

    let book = parse_workflow(&std::fs::read_to_string(golden("07-book-generation")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let group = book
        .agents
        .iter()
        .find(|a| a.agent_type == AgentType::GroupChat)
        .ok_or("book workflow has no group chat")?;
    let individuals = book.agents.iter().filter(|a| !a.is_group()).count();
    ensure!(group.members.len() == 3 && individuals == 4, "book workflow is not a 4-agent group chat");
    ensure!(book.models.iter().all(|m| m.script.is_some()), "book workflow must use mock models");
    Ok(())
}

// -------------------------------------------------------------------- sandbox

fn skill(name: &str, source: &str) -> SkillSpec {
    SkillSpec {
        id: name.into(),
        name: name.into(),
        description: String::new(),
        language: SkillLanguage::Shell,
        source: source.into(),
        timeout_s: 5.0,
        env_allowlist: vec![],
        parameters: None,
    }
}

fn tool_sandbox() -> Outcome {
    let mut registry = SkillRegistry::new();
    for s in [
        skill("echo", "echo \"$1\""),
        skill("fail", "echo broken >&2; exit 3"),
        skill("slow", "sleep 30 & sleep 30"),
        skill("artifact", "printf 'PNG' > chart.png; echo saved"),
        skill("escape", "echo out > ../escaped.txt"),
    ] {
        registry.register(s).map_err(|e| e.to_string())?;
    }
    let rt = ToolRuntime::new(registry, Sandbox::new(SandboxConfig::default()));
    let outer = tempfile::tempdir().map_err(|e| e.to_string())?;
    let workdir = outer.path().join("scratch");
    std::fs::create_dir(&workdir).map_err(|e| e.to_string())?;
    let call = |id: &str, args: Value, timeout_s: f64| {
        rt.execute(&ToolInvocation {
            target: ToolTarget::Skill { id: id.into() },
            arguments: args.as_object().cloned().unwrap_or_default(),
            session_workdir: workdir.clone(),
            timeout_s,
        })
    };

    let r = call("echo", json!({"text": "hello"}), 5.0);
    ensure!(
        (r.status, r.exit_code, r.stdout.as_str(), r.failure_kind, r.artifacts.len())
            == (ToolStatus::Success, 0, "text=hello\n", None, 0),
        "echo: {r:?}"
    );

    let r = call("fail", json!({}), 5.0);
    ensure!(
        (r.status, r.exit_code, r.stderr.as_str(), r.failure_kind)
            == (ToolStatus::Failure, 3, "broken\n", Some(FailureKind::NonzeroExit)),
        "fail: {r:?}"
    );

    let start = Instant::now();
    let r = call("slow", json!({}), 1.0);
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(
        r.status == ToolStatus::Failure && r.failure_kind == Some(FailureKind::Timeout),
        "slow: {r:?}"
    );
    ensure!((1.0..=1.5).contains(&elapsed), "timeout enforced after {elapsed:.3}s");

    let r = call("artifact", json!({}), 5.0);
    let found: Vec<(&str, u64, MediaKind)> = r.artifacts.iter().map(|a| (a.path.as_str(), a.bytes, a.media_kind)).collect();
    ensure!(r.is_success() && found == [("chart.png", 3, MediaKind::Image)], "artifact: {r:?}");

    ensure!(rt.sandbox().confines_filesystem(), "filesystem confinement is unavailable on this kernel");
    let r = call("escape", json!({}), 5.0);
    ensure!(r.status == ToolStatus::Failure, "escape succeeded: {r:?}");
    ensure!(!outer.path().join("escaped.txt").exists(), "escape wrote outside the workdir");
    Ok(())
}

// -------------------------------------------------------------------- persona

fn created(srv: &InProcess, plural: &str, body: Value) -> Result<String, String> {
    let (status, v) = common::post(&srv.url(&format!("/api/{plural}")), body);
    ensure!(status == 201, "creating {plural}: {status} {v}");
    Ok(v["data"]["id"].as_str().unwrap_or_default().to_string())
}

fn persona() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let srv = InProcess::start(dir.path(), ServerConfig::default());
    let price = json!({"prompt_per_1k": 0.5, "completion_per_1k": 1.5});

    let images = created(
        &srv,
        "skills",
        json!({"name": "generate_images", "language": "shell",
               "description": "Render an illustration for a page.",
               "source": "printf 'PNG' > page-1.png; echo \"drew: $1\""}),
    )?;
    let pdf = created(
        &srv,
        "skills",
        json!({"name": "make_pdf", "language": "shell",
               "description": "Bundle the pages into book.pdf.",
               "source": "printf '%%PDF-1.4' > book.pdf; echo wrote book.pdf"}),
    )?;
    let content_model = created(
        &srv,
        "models",
        json!({"name": "story writer", "provider": "mock", "model_name": "alpha-v1", "pricing": price,
               "script": {"steps": [{"content": "Page 1: a fox finds a red kite."}]}}),
    )?;
    let image_model = created(
        &srv,
        "models",
        json!({"name": "illustrator", "provider": "mock", "model_name": "alpha-v1", "pricing": price,
               "script": {"steps": [
                   {"content": "", "tool_calls": [{"name": "generate_images", "arguments": {"prompt": "fox with a red kite"}}]},
                   {"content": "Illustration saved as page-1.png."}]}}),
    )?;
    let pdf_model = created(
        &srv,
        "models",
        json!({"name": "publisher", "provider": "mock", "model_name": "alpha-v1", "pricing": price,
               "script": {"steps": [
                   {"content": "", "tool_calls": [{"name": "make_pdf", "arguments": {"title": "The Fox and the Kite"}}]},
                   {"content": "book.pdf is ready. TERMINATE"}]}}),
    )?;
    let user = created(&srv, "agents", json!({"type": "user_proxy", "name": "user"}))?;
    let content = created(
        &srv,
        "agents",
        json!({"type": "assistant", "name": "content_agent", "model_ref": content_model,
               "system_message": "Write the story for each page."}),
    )?;
    let image = created(
        &srv,
        "agents",
        json!({"type": "assistant", "name": "image_agent", "model_ref": image_model, "skill_refs": [images],
               "system_message": "Illustrate each page."}),
    )?;
    let publisher = created(
        &srv,
        "agents",
        json!({"type": "assistant", "name": "pdf_agent", "model_ref": pdf_model, "skill_refs": [pdf],
               "system_message": "Assemble the book, then reply TERMINATE."}),
    )?;
    let team = created(
        &srv,
        "agents",
        json!({"type": "group_chat", "name": "book_team", "members": [content, image, publisher]}),
    )?;
    let workflow = created(
        &srv,
        "workflows",
        json!({"name": "children's book", "pattern": "autonomous_chat", "initiator_ref": user,
               "receiver_ref": team, "termination": {"max_turns": 12}}),
    )?;
    let session = created(&srv, "sessions", json!({"workflow_ref": workflow, "name": "first book"}))?;

    let mut ws = srv.subscribe(&session);
    let (status, run) = common::post(
        &srv.url(&format!("/api/sessions/{session}/run")),
        json!({"task": "Create a one-page children's book about a fox and a kite."}),
    );
    ensure!(status == 200, "run: {status} {run}");
    let frames = ws.until_terminal();
    let kinds: Vec<&str> = frames.iter().filter_map(|f| f["kind"].as_str()).collect();
    ensure!(kinds.contains(&"tool_started") && kinds.contains(&"tool_finished"), "no tool events in {kinds:?}");
    ensure!(kinds.last() == Some(&"run_finished"), "run ended with {kinds:?}");
    ensure!(run["data"]["status"] == "terminated_keyword", "status {}", run["data"]["status"]);

    let (_, p) = common::get(&srv.url(&format!("/api/sessions/{session}/profile")));
    let total_cost = p["data"]["total_cost"].as_f64().unwrap_or(0.0);
    ensure!(p["data"]["total_messages"].as_u64().unwrap_or(0) > 0 && total_cost > 0.0, "profile {p}");
    let calls: u64 = p["data"]["per_agent"]
        .as_object()
        .map(|m| m.values().filter_map(|a| a["tool_success"].as_u64()).sum())
        .unwrap_or(0);
    ensure!(calls == 2, "expected 2 successful tool calls, profile {p}");
    let (_, files) = common::get(&srv.url(&format!("/api/sessions/{session}/files")));
    let names: Vec<&str> = files["data"]
        .as_array()
        .map(|a| a.iter().filter_map(|f| f["path"].as_str()).collect())
        .unwrap_or_default();
    ensure!(names.contains(&"book.pdf") && names.contains(&"page-1.png"), "files {names:?}");

    let exported = common::agent()
        .get(&srv.url(&format!("/api/workflows/{workflow}/export")))
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    let path = dir.path().join("book.json");
    std::fs::write(&path, &exported).map_err(|e| e.to_string())?;
    parse_workflow(&exported).map_err(|e| format!("export does not parse: {e}"))?;
    srv.stop();

    let cli = Cli::new();
    let served = cli.spawn_server(&["serve", "--workflow", path.to_str().unwrap(), "--port", "0"]);
    let (status, v) = common::post(
        &format!("{}/predict", served.url),
        json!({"task": "Create a one-page children's book about an owl."}),
    );
    ensure!(status == 200 && v["status"] == "ok", "predict: {status} {v}");
    ensure!(v["data"]["status"] == "terminated_keyword", "predict status {}", v["data"]["status"]);
    ensure!(served.terminate().success(), "serve did not exit cleanly");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(())
}

// ------------------------------------------------------------------ crud laws

#[derive(Debug, Clone)]
enum Op {
    Model,
    Skill,
    Memory,
    Agent { model: usize, skills: u8, memory: Option<usize> },
    Proxy,
    Group(u8),
    Workflow(usize, usize),
    Session(usize),
    Retarget(usize, usize),
    Tag(usize, u8),
    Delete(usize, bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => Just(Op::Model),
        1 => Just(Op::Skill),
        1 => Just(Op::Memory),
        3 => (any::<usize>(), any::<u8>(), any::<Option<usize>>())
            .prop_map(|(model, skills, memory)| Op::Agent { model, skills, memory }),
        1 => Just(Op::Proxy),
        1 => any::<u8>().prop_map(Op::Group),
        2 => (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Op::Workflow(a, b)),
        1 => any::<usize>().prop_map(Op::Session),
        2 => (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Op::Retarget(a, b)),
        1 => (any::<usize>(), any::<u8>()).prop_map(|(a, t)| Op::Tag(a, t)),
        4 => (any::<usize>(), any::<bool>()).prop_map(|(a, f)| Op::Delete(a, f)),
    ]
}

const KINDS: [&str; 6] = ["models", "skills", "memories", "agents", "workflows", "sessions"];

/// Every entity, keyed by `(kind, id)`.
fn snapshot(base: &str) -> Result<BTreeMap<(String, String), Value>, String> {
    let mut all = BTreeMap::new();
    for plural in KINDS {
        let (status, v) = common::get(&format!("{base}/api/{plural}"));
        ensure!(status == 200, "listing {plural}: {status}");
        for e in v["data"].as_array().cloned().unwrap_or_default() {
            let kind = e["kind"].as_str().unwrap_or_default().to_string();
            let id = e["id"].as_str().unwrap_or_default().to_string();
            all.insert((kind, id), e);
        }
    }
    Ok(all)
}

/// Outgoing strong references of an entity, read straight from its JSON.
fn refs_of(e: &Value) -> Vec<(String, String)> {
    let p = &e["payload"];
    let one = |kind: &str, v: &Value| v.as_str().map(|id| (kind.to_string(), id.to_string()));
    let many = |kind: &str, v: &Value| -> Vec<(String, String)> {
        v.as_array()
            .map(|a| a.iter().filter_map(|x| one(kind, x)).collect())
            .unwrap_or_default()
    };
    match e["kind"].as_str() {
        Some("agent") => one("model", &p["model_ref"])
            .into_iter()
            .chain(one("memory", &p["memory_ref"]))
            .chain(many("skill", &p["skill_refs"]))
            .chain(many("agent", &p["members"]))
            .collect(),
        Some("workflow") => one("agent", &p["initiator_ref"])
            .into_iter()
            .chain(one("agent", &p["receiver_ref"]))
            .chain(many("agent", &p["sequence"]))
            .collect(),
        _ => Vec::new(),
    }
}

fn dangling(all: &BTreeMap<(String, String), Value>) -> Vec<String> {
    all.values()
        .flat_map(|e| refs_of(e).into_iter().map(move |r| (e["id"].clone(), r)))
        .filter(|(_, r)| !all.contains_key(r))
        .map(|(from, (kind, id))| format!("{from} -> {kind} {id}"))
        .collect()
}

fn ids_of(all: &BTreeMap<(String, String), Value>, kind: &str) -> Vec<String> {
    all.keys().filter(|(k, _)| k == kind).map(|(_, id)| id.clone()).collect()
}

fn pick(ids: &[String], i: usize) -> Option<String> {
    (!ids.is_empty()).then(|| ids[i % ids.len()].clone())
}

fn subset(ids: &[String], mask: u8) -> Vec<String> {
    ids.iter().take(8).enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| id.clone()).collect()
}

fn expect_created(what: &str, status: u16, v: &Value) -> Result<(), String> {
    ensure!(status == 201 || status == 422, "{what}: unexpected {status} {v}");
    Ok(())
}

fn apply(base: &str, op: &Op, n: usize) -> Result<(), String> {
    let all = snapshot(base)?;
    let post = |plural: &str, body: Value| common::post(&format!("{base}/api/{plural}"), body);
    let models = ids_of(&all, "model");
    let agents = ids_of(&all, "agent");
    match op {
        Op::Model => {
            let (s, v) = post("models", json!({"name": format!("m{n}"), "provider": "mock", "model_name": "mock-1"}));
            expect_created("model", s, &v)?;
        }
        Op::Skill => {
            let (s, v) = post("skills", json!({"name": format!("s{n}"), "language": "shell", "source": "true"}));
            expect_created("skill", s, &v)?;
        }
        Op::Memory => {
            let (s, v) = post("memories", json!({"kind": "naive-store"}));
            expect_created("memory", s, &v)?;
        }
        Op::Agent { model, skills, memory } => {
            let Some(model) = pick(&models, *model) else { return Ok(()) };
            let mut body = json!({"type": "assistant", "name": format!("a{n}"), "model_ref": model,
                                  "skill_refs": subset(&ids_of(&all, "skill"), *skills)});
            if let Some(m) = memory.and_then(|i| pick(&ids_of(&all, "memory"), i)) {
                body["memory_ref"] = json!(m);
            }
            let (s, v) = post("agents", body);
            expect_created("agent", s, &v)?;
        }
        Op::Proxy => {
            let (s, v) = post("agents", json!({"type": "user_proxy", "name": format!("u{n}")}));
            expect_created("proxy", s, &v)?;
        }
        Op::Group(mask) => {
            let members: Vec<String> = subset(&agents, *mask)
                .into_iter()
                .filter(|id| all[&("agent".to_string(), id.clone())]["payload"]["type"] != "group_chat")
                .collect();
            let (s, v) = post("agents", json!({"type": "group_chat", "name": format!("g{n}"), "members": members}));
            expect_created("group", s, &v)?;
        }
        Op::Workflow(a, b) => {
            let (Some(a), Some(b)) = (pick(&agents, *a), pick(&agents, *b)) else { return Ok(()) };
            let (s, v) = post(
                "workflows",
                json!({"name": format!("w{n}"), "pattern": "autonomous_chat", "initiator_ref": a, "receiver_ref": b}),
            );
            expect_created("workflow", s, &v)?;
        }
        Op::Session(w) => {
            let Some(w) = pick(&ids_of(&all, "workflow"), *w) else { return Ok(()) };
            let (s, v) = post("sessions", json!({"workflow_ref": w, "name": format!("s{n}")}));
            ensure!(s == 201, "session: {s} {v}");
        }
        Op::Retarget(a, m) => {
            let assistants: Vec<String> = agents
                .iter()
                .filter(|id| all[&("agent".to_string(), (*id).clone())]["payload"]["type"] == "assistant")
                .cloned()
                .collect();
            let (Some(a), Some(m)) = (pick(&assistants, *a), pick(&models, *m)) else { return Ok(()) };
            let mut body = all[&("agent".to_string(), a.clone())]["payload"].clone();
            body["id"] = json!(a);
            body["model_ref"] = json!(m);
            let (s, v) = post("agents", body);
            ensure!(s == 200 && v["data"]["payload"]["model_ref"] == json!(m), "retarget: {s} {v}");
        }
        Op::Tag(i, t) => {
            let taggable: Vec<&(String, String)> = all.keys().filter(|(k, _)| k != "session").collect();
            if taggable.is_empty() {
                return Ok(());
            }
            let key = taggable[i % taggable.len()];
            let plural = match key.0.as_str() {
                "memory" => "memories".to_string(),
                k => format!("{k}s"),
            };
            let mut body = all[key]["payload"].clone();
            body["id"] = json!(key.1);
            body["tags"] = json!([format!("t{}", t % 4)]);
            let (s, v) = post(&plural, body);
            ensure!(s == 200 && v["data"]["tags"] == json!([format!("t{}", t % 4)]), "tag: {s} {v}");
        }
        Op::Delete(i, force) => {
            let keys: Vec<&(String, String)> = all.keys().collect();
            if keys.is_empty() {
                return Ok(());
            }
            let (kind, id) = keys[i % keys.len()].clone();
            let target = (kind.clone(), id.clone());
            let referenced = all.values().any(|e| refs_of(e).contains(&target));
            let plural = match kind.as_str() {
                "memory" => "memories".to_string(),
                k => format!("{k}s"),
            };
            let (s, v) = common::delete(&format!("{base}/api/{plural}/{id}?force={force}"));
            let expected = if referenced && !force { 409 } else { 200 };
            ensure!(s == expected, "delete {kind} {id} (referenced={referenced}, force={force}): {s} {v}");
            let (s, _) = common::get(&format!("{base}/api/{plural}/{id}"));
            ensure!((s == 404) == (expected == 200), "after delete {kind} {id}: GET {s}");
        }
    }
    Ok(())
}

fn crud_case(ops: &[Op]) -> Result<(), String> {
    let cli = Cli::new();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let db = dir.path().join("laws.db");
    let db = db.to_str().unwrap();
    let srv = cli.spawn_server(&["ui", "--port", "0", "--db", db]);
    for (n, op) in ops.iter().enumerate() {
        apply(&srv.url, op, n)?;
        let all = snapshot(&srv.url)?;
        let bad = dangling(&all);
        ensure!(bad.is_empty(), "after {op:?}: dangling {bad:?}");
    }
    let before = snapshot(&srv.url)?;
    ensure!(srv.terminate().success(), "ui did not exit cleanly");

    let srv = cli.spawn_server(&["ui", "--port", "0", "--db", db]);
    let after = snapshot(&srv.url)?;
    ensure!(before == after, "entities changed across a restart");
    ensure!(dangling(&after).is_empty(), "dangling references after restart");
    Ok(())
}

fn crud_laws() -> Outcome {
    let config = Config {
        cases: 16,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    let mut runner = TestRunner::new_with_rng(config, rng);
    runner
        .run(&prop::collection::vec(op(), 1..30), |ops| {
            crud_case(&ops).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())
}
