use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{Map, Value};
use wait_timeout::ChildExt;

use super::snapshot::{diff_snapshots, snapshot, INTERNAL_DIR};
use super::{FailureKind, ToolResult, ToolStatus};
use crate::backend::{process_env, EnvLookup};
use crate::schema::SkillLanguage;

pub const DEFAULT_GRACE: Duration = Duration::from_millis(500);
pub const DEFAULT_OUTPUT_LIMIT: usize = 64 * 1024;
const SEARCH_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

/// Filesystem confinement for child processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    /// Landlock when the kernel supports it, otherwise none.
    Auto,
    /// Landlock, or refuse to run.
    Required,
    Disabled,
}

#[derive(Clone)]
pub struct SandboxConfig {
    pub grace: Duration,
    pub output_limit: usize,
    pub isolation: Isolation,
    pub shell: String,
    /// Interpreter for `interpreted-script` skills without a shebang line.
    pub script_interpreter: String,
    /// Readable (and executable) outside the workdir.
    pub read_only_paths: Vec<PathBuf>,
    /// Source of the values for each skill's `env_allowlist`.
    pub env: EnvLookup,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            grace: DEFAULT_GRACE,
            output_limit: DEFAULT_OUTPUT_LIMIT,
            isolation: Isolation::Auto,
            shell: "sh".into(),
            script_interpreter: "python3".into(),
            read_only_paths: [
                "/usr", "/bin", "/sbin", "/lib", "/lib32", "/lib64", "/etc", "/opt", "/proc",
            ]
            .into_iter()
            .map(PathBuf::from)
            .collect(),
            env: process_env(),
        }
    }
}

#[derive(Clone, Default)]
pub struct Sandbox {
    config: Arc<SandboxConfig>,
}

#[derive(Default)]
struct Captured {
    bytes: Vec<u8>,
    total: usize,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Sandbox {
            config: Arc::new(config),
        }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Whether runs are confined to their workdir.
    pub fn confines_filesystem(&self) -> bool {
        match self.config.isolation {
            Isolation::Disabled => false,
            _ => landlock_abi().is_some(),
        }
    }

    pub(crate) fn run(
        &self,
        language: SkillLanguage,
        source: &str,
        arguments: &Map<String, Value>,
        env_allowlist: &[String],
        workdir: &Path,
        timeout_s: f64,
    ) -> ToolResult {
        if !(timeout_s > 0.0 && timeout_s.is_finite()) {
            return ToolResult::spawn_error(format!("invalid timeout {timeout_s}"));
        }
        let workdir = match workdir.canonicalize() {
            Ok(dir) if dir.is_dir() => dir,
            _ => {
                return ToolResult::spawn_error(format!(
                    "session workdir {} does not exist",
                    workdir.display()
                ))
            }
        };
        let internal = workdir.join(INTERNAL_DIR);
        let tmp = internal.join("tmp");
        let scripts = internal.join("scripts");
        if let Err(e) = fs::create_dir_all(&tmp).and_then(|_| fs::create_dir_all(&scripts)) {
            return ToolResult::spawn_error(format!("cannot prepare workdir: {e}"));
        }

        let before = snapshot(&workdir);
        let (mut command, script_path) = match self.command_for(language, source, &scripts) {
            Ok(c) => c,
            Err(e) => return ToolResult::spawn_error(format!("cannot materialize script: {e}")),
        };
        command.args(argv(arguments));
        command
            .current_dir(&workdir)
            .env_clear()
            .env("PATH", SEARCH_PATH)
            .env("HOME", &workdir)
            .env("TMPDIR", &tmp)
            .env("LANG", "C.UTF-8")
            .env("AGENTLOOM_ARGS", Value::Object(arguments.clone()).to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for var in env_allowlist {
            if let Some(value) = (self.config.env)(var) {
                command.env(var, value);
            }
        }

        let timeout = Duration::from_secs_f64(timeout_s);
        let started = Instant::now();
        let spawned = self.spawn(&mut command, &workdir);
        let mut child = match spawned {
            Ok(child) => child,
            Err(e) => {
                let _ = fs::remove_file(&script_path);
                return ToolResult::spawn_error(format!("failed to start process: {e}"));
            }
        };
        let pid = child.id() as i32;
        let limit = self.config.output_limit;
        let (done_tx, done_rx) = mpsc::channel();
        let stdout = capture(child.stdout.take(), limit, done_tx.clone());
        let stderr = capture(child.stderr.take(), limit, done_tx);

        let (exit, timed_out) = wait_with_timeout(&mut child, timeout);
        kill_group(pid);
        // Readers finish once every process holding the pipes is gone.
        let deadline = started + timeout + self.config.grace;
        for _ in 0..2 {
            let left = deadline.saturating_duration_since(Instant::now());
            if done_rx.recv_timeout(left.max(Duration::from_millis(10))).is_err() {
                break;
            }
        }
        let duration_s = started.elapsed().as_secs_f64();
        let _ = fs::remove_file(&script_path);

        let after = snapshot(&workdir);
        let artifacts = diff_snapshots(&before, &after);
        let stdout = render(&stdout, limit);
        let stderr = render(&stderr, limit);

        let (status, exit_code, failure_kind) = match (timed_out, exit) {
            (true, code) => (ToolStatus::Failure, code.unwrap_or(137), Some(FailureKind::Timeout)),
            (false, Some(0)) => (ToolStatus::Success, 0, None),
            (false, Some(code)) => (ToolStatus::Failure, code, Some(FailureKind::NonzeroExit)),
            (false, None) => (ToolStatus::Failure, -1, Some(FailureKind::NonzeroExit)),
        };
        ToolResult {
            status,
            exit_code,
            stdout,
            stderr,
            duration_s,
            artifacts,
            failure_kind,
        }
    }

    fn command_for(
        &self,
        language: SkillLanguage,
        source: &str,
        scripts: &Path,
    ) -> io::Result<(Command, PathBuf)> {
        let ext = match language {
            SkillLanguage::Shell => "sh",
            SkillLanguage::InterpretedScript => "script",
        };
        let path = scripts.join(format!("{}.{ext}", uuid::Uuid::new_v4().simple()));
        fs::write(&path, source)?;
        let command = match language {
            SkillLanguage::Shell => {
                let mut c = Command::new(&self.config.shell);
                c.arg(&path);
                c
            }
            SkillLanguage::InterpretedScript if source.starts_with("#!") => {
                #[cfg(unix)]
                {
                    use std::os::unix::fs::PermissionsExt;
                    fs::set_permissions(&path, fs::Permissions::from_mode(0o755))?;
                }
                Command::new(&path)
            }
            SkillLanguage::InterpretedScript => {
                let mut c = Command::new(&self.config.script_interpreter);
                c.arg(&path);
                c
            }
        };
        Ok((command, path))
    }

    #[cfg(target_os = "linux")]
    fn spawn(&self, command: &mut Command, workdir: &Path) -> io::Result<Child> {
        use super::landlock::{restrict_self, Ruleset, ACCESS_READ_DIR, ACCESS_READ_FILE, ACCESS_WRITE_FILE, READ_ONLY};
        use std::os::unix::process::CommandExt;

        command.process_group(0);
        let ruleset = match (self.config.isolation, landlock_abi()) {
            (Isolation::Disabled, _) => None,
            (Isolation::Auto, None) => {
                tracing::warn!("landlock is unavailable; skills run without filesystem confinement");
                None
            }
            (Isolation::Required, None) => {
                return Err(io::Error::new(
                    io::ErrorKind::Unsupported,
                    "filesystem isolation required but landlock is unavailable",
                ))
            }
            (_, Some(abi)) => {
                let rs = Ruleset::new(abi)?;
                for path in &self.config.read_only_paths {
                    rs.allow(path, READ_ONLY)?;
                }
                rs.allow(Path::new("/dev"), ACCESS_READ_FILE | ACCESS_WRITE_FILE | ACCESS_READ_DIR)?;
                rs.allow(workdir, rs.all_access())?;
                Some(rs)
            }
        };
        if let Some(rs) = &ruleset {
            let fd = rs.raw_fd();
            // SAFETY: restrict_self performs only async-signal-safe syscalls.
            unsafe {
                command.pre_exec(move || restrict_self(fd));
            }
        }
        // The ruleset fd stays open in the parent until spawn returns.
        let child = command.spawn();
        drop(ruleset);
        child
    }

    #[cfg(not(target_os = "linux"))]
    fn spawn(&self, command: &mut Command, _workdir: &Path) -> io::Result<Child> {
        if self.config.isolation == Isolation::Required {
            return Err(io::Error::new(
                io::ErrorKind::Unsupported,
                "filesystem isolation is only implemented on Linux",
            ));
        }
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            command.process_group(0);
        }
        command.spawn()
    }
}

#[cfg(target_os = "linux")]
fn landlock_abi() -> Option<i32> {
    static ABI: std::sync::OnceLock<Option<i32>> = std::sync::OnceLock::new();
    *ABI.get_or_init(super::landlock::abi_version)
}

#[cfg(not(target_os = "linux"))]
fn landlock_abi() -> Option<i32> {
    None
}

fn argv(arguments: &Map<String, Value>) -> Vec<String> {
    let mut keys: Vec<&String> = arguments.keys().collect();
    keys.sort();
    keys.into_iter()
        .map(|k| match &arguments[k] {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect()
}

fn capture<R: Read + Send + 'static>(
    stream: Option<R>,
    limit: usize,
    done: mpsc::Sender<()>,
) -> Arc<Mutex<Captured>> {
    let buf = Arc::new(Mutex::new(Captured::default()));
    let Some(mut stream) = stream else {
        let _ = done.send(());
        return buf;
    };
    let sink = buf.clone();
    thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match stream.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut c = sink.lock().unwrap();
                    c.total += n;
                    let room = limit.saturating_sub(c.bytes.len());
                    c.bytes.extend_from_slice(&chunk[..n.min(room)]);
                }
            }
        }
        let _ = done.send(());
    });
    buf
}

fn render(buf: &Mutex<Captured>, limit: usize) -> String {
    let c = buf.lock().unwrap();
    let mut text = String::from_utf8_lossy(&c.bytes).into_owned();
    if c.total > limit {
        text.push_str(&format!(
            "\n[output truncated: {} of {} bytes shown]",
            c.bytes.len(),
            c.total
        ));
    }
    text
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> (Option<i32>, bool) {
    match child.wait_timeout(timeout) {
        Ok(Some(status)) => (exit_code(status), false),
        Ok(None) | Err(_) => {
            kill_group(child.id() as i32);
            let _ = child.kill();
            let status = child.wait().ok();
            (status.and_then(exit_code), true)
        }
    }
}

fn exit_code(status: std::process::ExitStatus) -> Option<i32> {
    if let Some(code) = status.code() {
        return Some(code);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        status.signal().map(|s| 128 + s)
    }
    #[cfg(not(unix))]
    None
}

fn kill_group(pid: i32) {
    #[cfg(unix)]
    // SAFETY: signalling a process group we created; ESRCH is harmless.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    #[cfg(not(unix))]
    let _ = pid;
}
