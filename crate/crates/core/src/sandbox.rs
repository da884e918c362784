//! Child-process execution of generated scripts.
//!
//! The child gets exactly the resolved environment map, runs in its own
//! process group inside a fresh working directory, and is killed together
//! with all of its descendants when the wall-clock limit or a cancellation
//! hits. On Linux the child is also moved into an empty network namespace
//! unless networking is allowed; see [`network_isolation_supported`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contracts::ScriptSource;

/// Extra time allowed after the limit for killing the process group and
/// draining its pipes.
pub const KILL_GRACE: Duration = Duration::from_millis(1000);

const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    /// Absent when the process was killed (timeout or cancellation) or died
    /// from a signal.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub timed_out: bool,
    #[serde(default)]
    pub cancelled: bool,
    pub workdir: PathBuf,
    #[serde(default)]
    pub network_isolated: bool,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0) && !self.timed_out && !self.cancelled
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("interpreter `{0}` not found")]
    InterpreterNotFound(String),
    #[error("working directory {path} unusable: {reason}")]
    WorkdirUnusable { path: PathBuf, reason: String },
    #[error("failed to spawn interpreter: {0}")]
    Spawn(io::Error),
}

/// Shared flag used to stop a run from another thread.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// How scripts are launched.
#[derive(Debug, Clone)]
pub struct Executor {
    pub interpreter: Vec<String>,
    pub timeout: Duration,
    pub network_allowed: bool,
}

/// File extension used for a script of the given language.
pub fn script_extension(language: &str) -> &'static str {
    match language.to_ascii_lowercase().as_str() {
        "python" | "python3" | "py" => "py",
        "bash" | "sh" | "shell" => "sh",
        "r" => "R",
        "julia" => "jl",
        "javascript" | "js" => "js",
        _ => "txt",
    }
}

fn resolve_program(program: &str) -> Option<PathBuf> {
    let candidate = Path::new(program);
    if candidate.components().count() > 1 || candidate.is_absolute() {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|p| p.is_file())
}

fn check_workdir(workdir: &Path) -> Result<(), ExecError> {
    let unusable = |reason: String| ExecError::WorkdirUnusable {
        path: workdir.to_path_buf(),
        reason,
    };
    let mut entries = fs::read_dir(workdir).map_err(|e| unusable(e.to_string()))?;
    if entries.next().is_some() {
        return Err(unusable("directory is not empty".into()));
    }
    Ok(())
}

#[cfg(target_os = "linux")]
fn enter_empty_netns() -> io::Result<()> {
    // SAFETY: unshare is async-signal-safe and only touches the calling
    // (freshly forked, single-threaded) process.
    unsafe {
        if libc::unshare(libc::CLONE_NEWNET) == 0 {
            return Ok(());
        }
        if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) == 0 {
            return Ok(());
        }
    }
    Err(io::Error::last_os_error())
}

#[cfg(not(target_os = "linux"))]
fn enter_empty_netns() -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "no network namespaces"))
}

/// Whether this host can move children into an empty network namespace.
/// Probed once per process.
pub fn network_isolation_supported() -> bool {
    static SUPPORTED: OnceLock<bool> = OnceLock::new();
    *SUPPORTED.get_or_init(|| {
        let Some(sh) = resolve_program("sh") else {
            return false;
        };
        let mut cmd = Command::new(sh);
        cmd.args(["-c", "exit 0"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        // SAFETY: see enter_empty_netns.
        unsafe {
            cmd.pre_exec(enter_empty_netns);
        }
        cmd.status().map(|s| s.success()).unwrap_or(false)
    })
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; ESRCH (group already gone) is ignored.
    unsafe {
        libc::killpg(pgid as libc::pid_t, libc::SIGKILL);
    }
}

struct Capture {
    buf: Arc<Mutex<Vec<u8>>>,
    handle: JoinHandle<()>,
}

fn capture<R: Read + Send + 'static>(mut reader: R) -> Capture {
    let buf = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&buf);
    let handle = thread::spawn(move || {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => sink.lock().unwrap().extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
    });
    Capture { buf, handle }
}

impl Capture {
    /// Wait for EOF until `deadline`, then take whatever was read.
    fn finish(self, deadline: Instant) -> String {
        while !self.handle.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(2));
        }
        let bytes = std::mem::take(&mut *self.buf.lock().unwrap());
        String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned())
    }
}

impl Executor {
    pub fn new(interpreter: Vec<String>, timeout: Duration) -> Self {
        Self {
            interpreter,
            timeout,
            network_allowed: false,
        }
    }

    pub fn with_network(mut self, allowed: bool) -> Self {
        self.network_allowed = allowed;
        self
    }

    /// Resolve the interpreter program, failing early when it is missing.
    pub fn resolve_interpreter(&self) -> Result<PathBuf, ExecError> {
        let program = self.interpreter.first().map(String::as_str).unwrap_or("");
        resolve_program(program).ok_or_else(|| ExecError::InterpreterNotFound(program.to_string()))
    }

    fn command(&self, program: &Path, script_path: &Path) -> Command {
        let script = script_path.to_string_lossy();
        let mut args: Vec<String> = self.interpreter[1..]
            .iter()
            .map(|a| a.replace("{script}", &script))
            .collect();
        if !self.interpreter[1..].iter().any(|a| a.contains("{script}")) {
            args.push(script.into_owned());
        }
        let mut cmd = Command::new(program);
        cmd.args(args);
        cmd
    }

    /// Run one script in `workdir` (existing, empty) with exactly `env`.
    pub fn execute(
        &self,
        script: &ScriptSource,
        env: &BTreeMap<String, String>,
        workdir: &Path,
        cancel: Option<&CancelToken>,
    ) -> Result<ExecutionResult, ExecError> {
        let program = self.resolve_interpreter()?;
        check_workdir(workdir)?;
        let script_path = workdir.join(format!("script.{}", script_extension(&script.language_tag)));
        fs::write(&script_path, &script.text).map_err(|e| ExecError::WorkdirUnusable {
            path: workdir.to_path_buf(),
            reason: e.to_string(),
        })?;

        let isolate = !self.network_allowed && network_isolation_supported();
        let spawn = |isolate: bool| -> io::Result<Child> {
            let mut cmd = self.command(&program, &script_path);
            cmd.current_dir(workdir)
                .env_clear()
                .envs(env)
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .process_group(0);
            if isolate {
                // SAFETY: see enter_empty_netns.
                unsafe {
                    cmd.pre_exec(enter_empty_netns);
                }
            }
            cmd.spawn()
        };

        let started = Instant::now();
        let mut child = spawn(isolate).map_err(ExecError::Spawn)?;
        let pgid = child.id();
        let stdout = capture(child.stdout.take().expect("piped stdout"));
        let stderr = capture(child.stderr.take().expect("piped stderr"));

        let mut timed_out = false;
        let mut cancelled = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {}
                Err(_) => break None,
            }
            if started.elapsed() >= self.timeout {
                timed_out = true;
            } else if cancel.is_some_and(CancelToken::is_cancelled) {
                cancelled = true;
            }
            if timed_out || cancelled {
                kill_group(pgid);
                let _ = child.wait();
                break None;
            }
            thread::sleep(POLL_INTERVAL);
        };
        // Descendants left behind by a finished script die with the group.
        kill_group(pgid);

        let drain_deadline = Instant::now() + KILL_GRACE / 2;
        let stdout = stdout.finish(drain_deadline);
        let stderr = stderr.finish(drain_deadline);
        let exit_code = if timed_out || cancelled {
            None
        } else {
            status.and_then(|s| s.code())
        };
        Ok(ExecutionResult {
            exit_code,
            stdout,
            stderr,
            duration_ms: started.elapsed().as_millis() as u64,
            timed_out,
            cancelled,
            workdir: workdir.to_path_buf(),
            network_isolated: isolate,
        })
    }
}

/// Convenience wrapper around [`Executor::execute`].
pub fn execute(
    script: &ScriptSource,
    interpreter: &[String],
    env: &BTreeMap<String, String>,
    timeout: Duration,
    workdir: &Path,
) -> Result<ExecutionResult, ExecError> {
    Executor::new(interpreter.to_vec(), timeout).execute(script, env, workdir, None)
}
