//! `agentloom`: launch the UI server, serve a workflow as an endpoint, or
//! run one headlessly.

use std::io::{BufRead, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use agentloom_core::engine::{
    instantiate, EventBody, HumanInput, HumanInputRequest, HumanReply, NonInteractive, RunContext,
    RunEvent, RunStatus, RuntimeEnv,
};
use agentloom_core::profiler::{render_report, ReportFormat};
use agentloom_core::schema::{self, parse_bundle, parse_workflow, validate, SchemaError, Severity, WorkflowSpec};
use agentloom_core::store::{GalleryItem, SqliteStore};
use agentloom_core::tools::SCRATCH_DIR;
use agentloom_core::PricingTable;
use agentloom_server::{predict_router, router, serve, shutdown_signal, ServerConfig};

mod config;

use config::{FileConfig, Overrides, Settings};

const AFTER_HELP: &str = "\
Settings are resolved in this order: command-line flags, then environment
variables (AGENTLOOM_DB, AGENTLOOM_PRICING, AGENTLOOM_CONFIG), then the
config file, then built-in defaults. The config file is --config, or
<config dir>/agentloom/config.toml when it exists. Its keys are db, pricing,
static_dir, host, ui_port, serve_port and human_input_timeout_s.

Exit codes: 0 success, 1 run or runtime failure, 2 invalid workflow,
configuration or usage.";

#[derive(Debug, Parser)]
#[command(name = "agentloom", version, about = "Build, run and serve multi-agent workflows", after_help = AFTER_HELP)]
struct Cli {
    /// Config file to read instead of the per-user one.
    #[arg(long, global = true, env = "AGENTLOOM_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Pricing table (TOML) used for dollar costs.
    #[arg(long, global = true, env = "AGENTLOOM_PRICING", value_name = "PATH")]
    pricing: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the REST/WebSocket API and the web UI.
    Ui {
        /// Port to listen on [default: 8081].
        #[arg(long)]
        port: Option<u16>,
        /// Address to bind [default: 127.0.0.1].
        #[arg(long)]
        host: Option<String>,
        /// SQLite database file.
        #[arg(long, env = "AGENTLOOM_DB", value_name = "PATH")]
        db: Option<PathBuf>,
        /// Directory holding the built web UI.
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Serve one workflow document as `POST /predict`.
    Serve {
        /// Workflow document or gallery item containing a workflow.
        #[arg(long, value_name = "PATH")]
        workflow: PathBuf,
        /// Port to listen on [default: 8000].
        #[arg(long)]
        port: Option<u16>,
        /// Address to bind [default: 127.0.0.1].
        #[arg(long)]
        host: Option<String>,
    },
    /// Run a workflow once against a task and print the outcome.
    Run {
        #[arg(long, value_name = "PATH")]
        workflow: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
        /// Working directory for code and skills [default: a temporary
        /// directory removed afterwards].
        #[arg(long, value_name = "DIR")]
        workdir: Option<PathBuf>,
        /// Answer human input requests from stdin.
        #[arg(long)]
        interactive: bool,
        /// Print the profile table to stderr after the run.
        #[arg(long)]
        profile: bool,
    },
    /// Check a workflow document and print its validation report.
    Validate {
        #[arg(long, value_name = "PATH")]
        workflow: PathBuf,
    },
    /// Print a workflow document in canonical form.
    Fmt {
        #[arg(long, value_name = "PATH")]
        workflow: PathBuf,
        /// Rewrite the file instead of printing.
        #[arg(long)]
        write: bool,
    },
    /// Print the effective settings as TOML.
    Config {
        #[arg(long, env = "AGENTLOOM_DB", value_name = "PATH")]
        db: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    /// The final message only.
    Text,
    /// The full run result as JSON.
    Structured,
}

/// A failed command: message for stderr plus exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Ui { .. } | Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    let (file, path) = FileConfig::discover(cli.config.as_deref()).map_err(Failure::invalid)?;
    let mut over = Overrides {
        pricing: cli.pricing,
        ..Overrides::default()
    };
    match cli.command {
        Command::Ui { port, host, db, static_dir } => {
            over.ui_port = port;
            over.host = host;
            over.db = db;
            over.static_dir = static_dir;
            cmd_ui(Settings::resolve(over, file, path))
        }
        Command::Serve { workflow, port, host } => {
            over.serve_port = port;
            over.host = host;
            cmd_serve(Settings::resolve(over, file, path), &workflow)
        }
        Command::Run {
            workflow,
            task,
            format,
            workdir,
            interactive,
            profile,
        } => {
            let settings = Settings::resolve(over, file, path);
            cmd_run(&settings, &workflow, &task, format, workdir, interactive, profile)
        }
        Command::Validate { workflow } => cmd_validate(&workflow),
        Command::Fmt { workflow, write } => cmd_fmt(&workflow, write),
        Command::Config { db } => {
            over.db = db;
            let settings = Settings::resolve(over, file, path);
            print!("{}", toml::to_string(&settings).expect("settings serialize"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_pricing(settings: &Settings) -> Result<PricingTable, Failure> {
    match &settings.pricing {
        Some(path) => PricingTable::load(path)
            .map_err(|e| Failure::invalid(format!("cannot load pricing from {}: {e}", path.display()))),
        None => Ok(PricingTable::default()),
    }
}

/// Reads a workflow document, or the workflow inside a gallery item.
fn load_workflow(path: &Path) -> Result<WorkflowSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", path.display())))?;
    let diagnose = |e: SchemaError| Failure::invalid(format!("{}: {e}", path.display()));
    let value: Option<serde_json::Value> = serde_json::from_str(&text).ok();
    let is_item = value
        .as_ref()
        .and_then(|v| v.as_object())
        .is_some_and(|o| o.contains_key("payload") && o.contains_key("kind"));
    if !is_item {
        return parse_workflow(&text).map_err(diagnose);
    }
    let value = value.expect("checked above");
    let payload = value["payload"].to_string();
    let item: GalleryItem = schema::from_value_with_path(value).map_err(diagnose)?;
    let bundle = parse_bundle(&payload).map_err(diagnose)?;
    bundle.into_workflow_spec().ok_or_else(|| {
        Failure::invalid(format!(
            "{}: gallery item `{}` does not contain a workflow",
            path.display(),
            item.title
        ))
    })
}

fn load_valid_workflow(path: &Path) -> Result<WorkflowSpec, Failure> {
    let spec = load_workflow(path)?;
    let report = validate(&spec);
    for issue in report.issues.iter().filter(|i| i.severity == Severity::Warning) {
        eprintln!("warning: {}: {}", issue.path, issue.message);
    }
    if !report.ok {
        return Err(Failure::invalid(format!("{} is invalid:\n{report}", path.display())));
    }
    Ok(spec)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::runtime(format!("cannot start the async runtime: {e}")))
}

fn bind(rt: &tokio::runtime::Runtime, host: &str, port: u16) -> Result<tokio::net::TcpListener, Failure> {
    rt.block_on(tokio::net::TcpListener::bind((host, port)))
        .map_err(|e| Failure::runtime(format!("cannot listen on {host}:{port} (port {port}): {e}")))
}

fn url_of(addr: SocketAddr) -> String {
    format!("http://{addr}")
}

fn cmd_ui(settings: Settings) -> Result<ExitCode, Failure> {
    let pricing = load_pricing(&settings)?;
    let store = SqliteStore::open(&settings.db).map_err(|e| Failure::runtime(e.to_string()))?;
    let config = ServerConfig {
        pricing,
        static_dir: settings.static_dir.clone(),
        human_input_timeout: Duration::from_secs(settings.human_input_timeout_s),
        ..ServerConfig::default()
    };
    let rt = runtime()?;
    let listener = bind(&rt, &settings.host, settings.ui_port)?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!("agentloom UI running at {}", url_of(addr));
    tracing::info!(db = %settings.db.display(), "database opened");
    let app = router(Arc::new(store), config);
    rt.block_on(serve(listener, app, shutdown_signal()))
        .map_err(|e| Failure::runtime(format!("server failed: {e}")))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(settings: Settings, workflow: &Path) -> Result<ExitCode, Failure> {
    let spec = load_valid_workflow(workflow)?;
    let pricing = load_pricing(&settings)?;
    // surface credential problems before taking the port
    let probe = tempfile::tempdir().map_err(|e| Failure::runtime(e.to_string()))?;
    instantiate(&spec, RuntimeEnv::new(probe.path().join(SCRATCH_DIR)))
        .map_err(|e| Failure::invalid(e.to_string()))?;
    drop(probe);

    let config = ServerConfig {
        pricing,
        ..ServerConfig::default()
    };
    let rt = runtime()?;
    let listener = bind(&rt, &settings.host, settings.serve_port)?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "serving workflow `{}` at {}/predict",
        spec.workflow.name,
        url_of(addr)
    );
    let app = predict_router(spec, config);
    rt.block_on(serve(listener, app, shutdown_signal()))
        .map_err(|e| Failure::runtime(format!("server failed: {e}")))?;
    Ok(ExitCode::SUCCESS)
}

/// Prompts on stderr and reads one line from stdin per request.
struct StdinInput;

impl HumanInput for StdinInput {
    fn interactive(&self) -> bool {
        true
    }

    fn request(&self, request: &HumanInputRequest) -> HumanReply {
        eprint!("[{}] {}\n> ", request.agent, request.prompt);
        let _ = std::io::stderr().flush();
        let mut line = String::new();
        match std::io::stdin().lock().read_line(&mut line) {
            Ok(0) | Err(_) => HumanReply::Pending,
            Ok(_) => HumanReply::Text(line.trim_end_matches(['\r', '\n']).to_string()),
        }
    }
}

fn cmd_run(
    settings: &Settings,
    workflow: &Path,
    task: &str,
    format: OutputFormat,
    workdir: Option<PathBuf>,
    interactive: bool,
    show_profile: bool,
) -> Result<ExitCode, Failure> {
    let spec = load_valid_workflow(workflow)?;
    let pricing = load_pricing(settings)?;
    let scratch;
    let workdir = match workdir {
        Some(dir) => dir,
        None => {
            scratch = tempfile::Builder::new()
                .prefix("agentloom-run-")
                .tempdir()
                .map_err(|e| Failure::runtime(format!("cannot create a working directory: {e}")))?;
            scratch.path().join(SCRATCH_DIR)
        }
    };
    let env = RuntimeEnv::new(workdir).with_pricing(pricing);
    let inst = instantiate(&spec, env).map_err(|e| Failure::invalid(e.to_string()))?;

    let run_error: Mutex<Option<(String, String)>> = Mutex::new(None);
    let sink = |event: &RunEvent| {
        tracing::debug!(sequence = event.sequence, kind = event.body.kind(), "event");
        if let EventBody::RunError { code, message } = &event.body {
            *run_error.lock().unwrap() = Some((code.clone(), message.clone()));
        }
    };
    let input: &dyn HumanInput = if interactive { &StdinInput } else { &NonInteractive };
    let ctx = RunContext::new(&sink).with_input(input);
    let result = inst
        .execute(task, &[], &ctx)
        .map_err(|e| Failure::invalid(e.to_string()))?;

    match format {
        OutputFormat::Text => println!("{}", result.final_message.content),
        OutputFormat::Structured => print!("{}", schema::to_canonical_json(&result)),
    }
    if show_profile {
        eprint!("{}", render_report(&result.profile, ReportFormat::Text));
    }
    if result.status == RunStatus::Error {
        let (code, message) = run_error
            .into_inner()
            .unwrap()
            .unwrap_or_else(|| ("error".into(), "the run failed".into()));
        return Err(Failure::runtime(format!("run failed ({code}): {message}")));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(workflow: &Path) -> Result<ExitCode, Failure> {
    let spec = load_workflow(workflow)?;
    let report = validate(&spec);
    print!("{}", schema::to_canonical_json(&report));
    if report.ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_fmt(workflow: &Path, write: bool) -> Result<ExitCode, Failure> {
    let spec = load_workflow(workflow)?;
    let text = schema::export_workflow(&spec).map_err(|e| Failure::invalid(format!("{}: {e}", workflow.display())))?;
    if write {
        std::fs::write(workflow, text)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", workflow.display())))?;
    } else {
        print!("{text}");
    }
    Ok(ExitCode::SUCCESS)
}
