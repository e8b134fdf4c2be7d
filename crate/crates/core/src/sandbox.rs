//! Runs candidate programs against test cases in a separate interpreter
//! process.
//!
//! One interpreter process serves one [`ExecutionRequest`]. The engine writes
//! the request as JSON to the child's stdin, then reads one verdict line per
//! case followed by `{"done":true}`. Per-case timeouts are enforced by the
//! harness itself and, as a backstop, by killing the process group from here;
//! after such a kill the remaining cases are resumed in a fresh process.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tempfile::TempDir;
use thiserror::Error;

use crate::corpus::TestCase;
use crate::util::{map_bounded, truncate_utf8, Semaphore};

const HARNESS_SOURCE: &str = include_str!("../harness/harness.py");
const KILL_GRACE: Duration = Duration::from_millis(1000);
const STARTUP_GRACE: Duration = Duration::from_millis(2000);
const EXIT_WAIT: Duration = Duration::from_secs(2);
const STDERR_KEEP: usize = 8 * 1024;
/// Exit status the harness uses when it cannot parse the request.
const HARNESS_BAD_REQUEST: i32 = 3;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("no interpreter found (looked for {0})")]
    InterpreterMissing(String),
    #[error("invalid execution request: {0}")]
    InvalidRequest(String),
    #[error("failed to start interpreter: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("sandbox i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub wall_timeout_ms: u64,
    pub total_timeout_ms: u64,
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_timeout_ms: 5000,
            total_timeout_ms: 30000,
            max_output_bytes: 64 * 1024,
        }
    }
}

impl Limits {
    /// Tighter per-case budget for interactive use.
    pub fn interactive() -> Self {
        Self {
            wall_timeout_ms: 2000,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub prelude: Option<String>,
    pub program: String,
    pub entry_function: String,
    pub cases: Vec<TestCase>,
    pub limits: Limits,
}

impl ExecutionRequest {
    pub fn validate(&self) -> Result<(), SandboxError> {
        let l = &self.limits;
        if l.wall_timeout_ms == 0 || l.total_timeout_ms == 0 || l.max_output_bytes == 0 {
            return Err(SandboxError::InvalidRequest("limits must be positive".into()));
        }
        if l.total_timeout_ms < l.wall_timeout_ms {
            return Err(SandboxError::InvalidRequest(
                "total_timeout_ms must be at least wall_timeout_ms".into(),
            ));
        }
        Ok(())
    }

    fn case_timeout(&self, idx: usize) -> Duration {
        let ms = self.cases[idx].timeout_ms.min(self.limits.wall_timeout_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub status: CaseStatus,
    pub actual: Option<Value>,
    pub stderr_excerpt: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteVerdict {
    pub results: Vec<CaseResult>,
    pub all_passed: bool,
    pub failing_ids: Vec<String>,
}

impl SuiteVerdict {
    pub fn from_results(results: Vec<CaseResult>) -> Self {
        let failing_ids: Vec<String> = results
            .iter()
            .filter(|r| r.status != CaseStatus::Pass)
            .map(|r| r.case_id.clone())
            .collect();
        Self {
            all_passed: failing_ids.is_empty(),
            failing_ids,
            results,
        }
    }

    /// Zeroes wall-clock fields so verdicts can be compared across runs.
    pub fn clear_timings(&mut self) {
        for r in &mut self.results {
            r.duration_ms = 0;
        }
    }
}

/// The engine's port for running untrusted code.
pub trait Executor: Send + Sync {
    fn run_suite(&self, req: &ExecutionRequest) -> Result<SuiteVerdict, SandboxError>;

    /// Runs every request; results come back in request order.
    fn run_parallel(&self, reqs: &[ExecutionRequest]) -> Vec<Result<SuiteVerdict, SandboxError>> {
        reqs.iter().map(|r| self.run_suite(r)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SandboxConfig {
    /// Interpreter binary; searched on `PATH` when absent.
    pub interpreter: Option<PathBuf>,
    /// Replacement harness script; the built-in one is used when absent.
    pub harness: Option<PathBuf>,
    /// Maximum interpreter processes alive at once across all callers.
    pub workers: usize,
}

/// Subprocess-backed [`Executor`].
pub struct Sandbox {
    interpreter: PathBuf,
    harness: PathBuf,
    _harness_dir: Option<TempDir>,
    workers: usize,
    slots: Arc<Semaphore>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("interpreter", &self.interpreter)
            .field("harness", &self.harness)
            .field("workers", &self.workers)
            .finish()
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        let interpreter = match config.interpreter {
            Some(path) => {
                if find_executable(&path).is_none() {
                    return Err(SandboxError::InterpreterMissing(path.display().to_string()));
                }
                path
            }
            None => discover_interpreter()?,
        };
        let (harness, dir) = match config.harness {
            Some(path) => (path, None),
            None => {
                let dir = tempfile::Builder::new().prefix("hintkit-harness").tempdir()?;
                let path = dir.path().join("harness.py");
                std::fs::write(&path, HARNESS_SOURCE)?;
                (path, Some(dir))
            }
        };
        let workers = if config.workers == 0 { 4 } else { config.workers };
        Ok(Self {
            interpreter,
            harness,
            _harness_dir: dir,
            workers,
            slots: Arc::new(Semaphore::new(workers)),
        })
    }

    /// Sandbox with the system interpreter and default pool size.
    pub fn discover() -> Result<Self, SandboxError> {
        Self::new(SandboxConfig::default())
    }

    pub fn interpreter(&self) -> &Path {
        &self.interpreter
    }

    fn run_attempt(
        &self,
        req: &ExecutionRequest,
        first: usize,
        suite_deadline: Instant,
    ) -> Result<Attempt, SandboxError> {
        let workdir = tempfile::Builder::new().prefix("hintkit-run").tempdir()?;
        let sub = ExecutionRequest {
            cases: req.cases[first..].to_vec(),
            ..req.clone()
        };
        let payload = serde_json::to_vec(&sub).map_err(|e| SandboxError::InvalidRequest(e.to_string()))?;

        let mut cmd = Command::new(&self.interpreter);
        cmd.arg("-I")
            .arg("-S")
            .arg("-B")
            .arg(&self.harness)
            .current_dir(workdir.path())
            .env_clear()
            .env("HOME", workdir.path())
            .env("TMPDIR", workdir.path())
            .env("LC_ALL", "C.UTF-8")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let mut child = ChildGuard(cmd.spawn().map_err(SandboxError::Spawn)?);

        let mut stdin = child.0.stdin.take().expect("stdin piped");
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&payload);
        });
        let stderr = child.0.stderr.take().expect("stderr piped");
        let stderr_reader = thread::spawn(move || read_capped(stderr, STDERR_KEEP));
        let stdout = child.0.stdout.take().expect("stdout piped");
        let line_cap = req.limits.max_output_bytes * 16 + 64 * 1024;
        let lines = spawn_line_reader(stdout, line_cap);

        let mut attempt = Attempt::default();
        let mut idx = first;
        let mut last_progress = Instant::now();
        let mut startup = STARTUP_GRACE;

        let end = loop {
            if idx >= req.cases.len() && attempt.done {
                break End::Done;
            }
            let case_deadline = if idx < req.cases.len() {
                last_progress + req.case_timeout(idx) + KILL_GRACE + startup
            } else {
                last_progress + KILL_GRACE + startup
            };
            let deadline = case_deadline.min(suite_deadline);
            let wait = deadline.saturating_duration_since(Instant::now());
            match lines.recv_timeout(wait) {
                Ok(Line::Text(text)) => {
                    let trimmed = text.trim();
                    if !trimmed.starts_with('{') {
                        continue;
                    }
                    match parse_wire(trimmed) {
                        Ok(Wire::Done) => {
                            attempt.done = true;
                            if idx < req.cases.len() {
                                break End::Protocol(format!(
                                    "harness finished early; {} case(s) unanswered",
                                    req.cases.len() - idx
                                ));
                            }
                            break End::Done;
                        }
                        Ok(Wire::Verdict(v)) => {
                            if idx >= req.cases.len() || v.case_id != req.cases[idx].id {
                                break End::Protocol(format!(
                                    "unexpected verdict for case '{}'",
                                    v.case_id
                                ));
                            }
                            let mut excerpt = v.stderr;
                            excerpt.truncate(truncate_utf8(&excerpt, req.limits.max_output_bytes).len());
                            attempt.results.push(CaseResult {
                                case_id: v.case_id,
                                status: v.status,
                                actual: v.actual,
                                stderr_excerpt: excerpt,
                                duration_ms: v.duration_ms,
                            });
                            idx += 1;
                            last_progress = Instant::now();
                            startup = Duration::ZERO;
                        }
                        Err(msg) => break End::Protocol(msg),
                    }
                }
                Ok(Line::Overflow) => break End::Overflow,
                Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => break End::Eof,
                Err(RecvTimeoutError::Timeout) => {
                    if Instant::now() >= suite_deadline {
                        break End::SuiteTimeout;
                    }
                    break End::CaseTimeout;
                }
            }
        };

        let status = match end {
            End::Done | End::Eof => child.wait_for(EXIT_WAIT),
            _ => {
                child.kill();
                child.wait_for(EXIT_WAIT)
            }
        };
        let _ = writer.join();
        let stderr_text = stderr_reader.join().unwrap_or_default();
        let elapsed = last_progress.elapsed().as_millis() as u64;
        let excerpt = |msg: String| -> String {
            let mut s = msg;
            if !stderr_text.trim().is_empty() {
                s.push('\n');
                s.push_str(stderr_text.trim());
            }
            truncate_utf8(&s, req.limits.max_output_bytes).to_string()
        };

        match end {
            End::Done => {
                if let Some(code) = status.as_ref().and_then(|s| s.code()).filter(|c| *c != 0) {
                    let msg = format!("harness exited with status {code} after completion");
                    for r in &mut attempt.results {
                        r.status = CaseStatus::Error;
                        r.stderr_excerpt = excerpt(msg.clone());
                    }
                }
            }
            End::CaseTimeout | End::SuiteTimeout => {
                let case = &req.cases[idx.min(req.cases.len() - 1)];
                if idx < req.cases.len() {
                    attempt.results.push(CaseResult {
                        case_id: case.id.clone(),
                        status: CaseStatus::Timeout,
                        actual: None,
                        stderr_excerpt: format!(
                            "killed after {} ms without a verdict",
                            elapsed
                        ),
                        duration_ms: elapsed,
                    });
                    idx += 1;
                }
                attempt.suite_timed_out = matches!(end, End::SuiteTimeout);
            }
            End::Overflow => {
                if idx < req.cases.len() {
                    attempt.results.push(error_result(
                        &req.cases[idx].id,
                        excerpt("output limit exceeded".into()),
                        elapsed,
                    ));
                    idx += 1;
                }
            }
            End::Eof => {
                let code = status.as_ref().and_then(|s| s.code());
                let described = status
                    .map(|s| describe_exit(&s))
                    .unwrap_or_else(|| "unknown status".into());
                if code == Some(HARNESS_BAD_REQUEST) && attempt.results.is_empty() {
                    attempt.protocol_error =
                        Some(excerpt("harness rejected the request".into()));
                } else if idx < req.cases.len() {
                    attempt.results.push(error_result(
                        &req.cases[idx].id,
                        excerpt(format!("harness exited unexpectedly ({described})")),
                        elapsed,
                    ));
                    idx += 1;
                }
            }
            End::Protocol(msg) => {
                attempt.protocol_error = Some(excerpt(format!("harness protocol violation: {msg}")));
            }
        }
        attempt.next = idx;
        Ok(attempt)
    }
}

impl Executor for Sandbox {
    fn run_suite(&self, req: &ExecutionRequest) -> Result<SuiteVerdict, SandboxError> {
        req.validate()?;
        let _slot = self.slots.acquire();
        let suite_deadline =
            Instant::now() + Duration::from_millis(req.limits.total_timeout_ms) + KILL_GRACE + STARTUP_GRACE;
        let mut results: Vec<CaseResult> = Vec::with_capacity(req.cases.len());
        let mut next = 0;
        while next < req.cases.len() {
            let attempt = self.run_attempt(req, next, suite_deadline)?;
            results.extend(attempt.results);
            next = attempt.next;
            if let Some(msg) = attempt.protocol_error {
                for case in &req.cases[next..] {
                    results.push(error_result(&case.id, msg.clone(), 0));
                }
                break;
            }
            if attempt.suite_timed_out {
                for case in &req.cases[next..] {
                    results.push(CaseResult {
                        case_id: case.id.clone(),
                        status: CaseStatus::Timeout,
                        actual: None,
                        stderr_excerpt: "total time limit exceeded".into(),
                        duration_ms: 0,
                    });
                }
                break;
            }
        }
        Ok(SuiteVerdict::from_results(results))
    }

    fn run_parallel(&self, reqs: &[ExecutionRequest]) -> Vec<Result<SuiteVerdict, SandboxError>> {
        map_bounded(reqs, self.workers, |_, r| self.run_suite(r))
    }
}

#[derive(Default)]
struct Attempt {
    results: Vec<CaseResult>,
    next: usize,
    done: bool,
    suite_timed_out: bool,
    protocol_error: Option<String>,
}

enum End {
    Done,
    Eof,
    Overflow,
    CaseTimeout,
    SuiteTimeout,
    Protocol(String),
}

enum Line {
    Text(String),
    Overflow,
    Eof,
}

enum Wire {
    Done,
    Verdict(WireVerdict),
}

#[derive(Deserialize)]
struct WireVerdict {
    case_id: String,
    status: CaseStatus,
    #[serde(default)]
    actual: Option<Value>,
    #[serde(default)]
    stderr: String,
    #[serde(default)]
    duration_ms: u64,
}

fn parse_wire(line: &str) -> Result<Wire, String> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| format!("malformed verdict line: {e}"))?;
    if value.get("done").and_then(Value::as_bool) == Some(true) {
        return Ok(Wire::Done);
    }
    serde_json::from_value::<WireVerdict>(value)
        .map(Wire::Verdict)
        .map_err(|e| format!("malformed verdict line: {e}"))
}

fn error_result(case_id: &str, msg: String, duration_ms: u64) -> CaseResult {
    CaseResult {
        case_id: case_id.to_string(),
        status: CaseStatus::Error,
        actual: None,
        stderr_excerpt: msg,
        duration_ms,
    }
}

fn describe_exit(status: &ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(code), _) => format!("status {code}"),
        (None, Some(sig)) => format!("signal {sig}"),
        _ => "unknown status".into(),
    }
}

struct ChildGuard(Child);

impl ChildGuard {
    fn kill(&mut self) {
        let pid = self.0.id() as libc::pid_t;
        // The child leads its own process group; take any stragglers with it.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
        let _ = self.0.kill();
    }

    fn wait_for(&mut self, limit: Duration) -> Option<ExitStatus> {
        let until = Instant::now() + limit;
        loop {
            match self.0.try_wait() {
                Ok(Some(status)) => return Some(status),
                Ok(None) if Instant::now() < until => thread::sleep(Duration::from_millis(5)),
                _ => {
                    self.kill();
                    return self.0.wait().ok();
                }
            }
        }
    }
}

impl Drop for ChildGuard {
    fn drop(&mut self) {
        if let Ok(None) = self.0.try_wait() {
            self.kill();
            let _ = self.0.wait();
        }
    }
}

fn spawn_line_reader<R: Read + Send + 'static>(stream: R, line_cap: usize) -> Receiver<Line> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            let mut buf = Vec::new();
            let read = (&mut reader)
                .take(line_cap as u64 + 1)
                .read_until(b'\n', &mut buf);
            match read {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Line::Eof);
                    return;
                }
                Ok(_) => {
                    if buf.len() > line_cap && !buf.ends_with(b"\n") {
                        let _ = tx.send(Line::Overflow);
                        return;
                    }
                    let text = String::from_utf8_lossy(&buf).into_owned();
                    if tx.send(Line::Text(text)).is_err() {
                        return;
                    }
                }
            }
        }
    });
    rx
}

fn read_capped<R: Read>(mut stream: R, keep: usize) -> String {
    let mut kept = Vec::new();
    let mut chunk = [0u8; 4096];
    while let Ok(n) = stream.read(&mut chunk) {
        if n == 0 {
            break;
        }
        if kept.len() < keep {
            let take = n.min(keep - kept.len());
            kept.extend_from_slice(&chunk[..take]);
        }
    }
    String::from_utf8_lossy(&kept).into_owned()
}

fn find_executable(path: &Path) -> Option<PathBuf> {
    if path.components().count() > 1 {
        return path.is_file().then(|| path.to_path_buf());
    }
    let search = std::env::var_os("PATH")?;
    std::env::split_paths(&search)
        .map(|dir| dir.join(path))
        .find(|p| p.is_file())
}

fn discover_interpreter() -> Result<PathBuf, SandboxError> {
    if let Some(configured) = std::env::var_os("HINTKIT_PYTHON") {
        let path = PathBuf::from(configured);
        return find_executable(&path)
            .ok_or_else(|| SandboxError::InterpreterMissing(path.display().to_string()));
    }
    ["python3", "python"]
        .iter()
        .find_map(|name| find_executable(Path::new(name)))
        .ok_or_else(|| SandboxError::InterpreterMissing("python3, python".into()))
}
