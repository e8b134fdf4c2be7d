//! Tasks, test suites and buggy programs, plus loading and validation of
//! dataset directories.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.json          name, schema_version, task and bug file lists
//! tasks/<id>.json        one task with its test cases inline
//! bugs/<id>.py           buggy program source
//! bugs/<id>.json         sidecar: id, task_id, origin, split
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sandbox::{CaseResult, ExecutionRequest, Executor, Limits, SandboxError, SuiteVerdict};
use crate::util::to_canonical_json;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FLOAT_EPS: f64 = 1e-6;
pub const MIN_CASE_TIMEOUT_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { path: PathBuf, found: u32 },
    #[error("{path}: duplicate {kind} id '{id}'")]
    DuplicateId {
        path: PathBuf,
        kind: &'static str,
        id: String,
    },
    #[error("{path}: bug '{bug_id}' references unknown task_id '{task_id}'")]
    DanglingTask {
        path: PathBuf,
        bug_id: String,
        task_id: String,
    },
    #[error("{path}: field '{field}': {message}")]
    Invalid {
        path: PathBuf,
        field: String,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, field: impl Into<String>, message: impl Into<String>) -> CorpusError {
    CorpusError::Invalid {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompareMode {
    Exact,
    FloatTol { eps: f64 },
    Boolean,
}

impl Default for CompareMode {
    fn default() -> Self {
        CompareMode::Exact
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub args: Vec<Value>,
    pub expected: Value,
    #[serde(default)]
    pub compare_mode: CompareMode,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub title: String,
    pub description: String,
    pub entry_function: String,
    /// Source injected before the learner program.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prelude: Option<String>,
    /// When set, `prelude` was read from this file (relative to the corpus root).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prelude_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    pub difficulty: Difficulty,
    #[serde(rename = "tests")]
    pub suite: Vec<TestCase>,
}

impl Task {
    pub fn case(&self, id: &str) -> Option<&TestCase> {
        self.suite.iter().find(|c| c.id == id)
    }

    /// Execution request for `program` against the full suite.
    pub fn execution_request(&self, program: &str, limits: Limits) -> ExecutionRequest {
        ExecutionRequest {
            prelude: self.prelude.clone(),
            program: program.to_string(),
            entry_function: self.entry_function.clone(),
            cases: self.suite.clone(),
            limits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    RealWorld,
    Designed,
    ModelGenerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Evaluation,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuggyProgram {
    pub id: String,
    pub task_id: String,
    #[serde(skip)]
    pub source: String,
    pub origin: Origin,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    schema_version: u32,
    tasks: Vec<String>,
    bugs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub tasks: Vec<Task>,
    pub bugs: Vec<BuggyProgram>,
}

impl Corpus {
    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn bug(&self, id: &str) -> Option<&BuggyProgram> {
        self.bugs.iter().find(|b| b.id == id)
    }

    pub fn bugs_in(&self, split: Split) -> impl Iterator<Item = &BuggyProgram> {
        self.bugs.iter().filter(move |b| b.split == split)
    }

    /// Checks the structural invariants that do not need an executor.
    pub fn check(&self, path: &Path) -> Result<(), CorpusError> {
        let mut task_ids = HashSet::new();
        for task in &self.tasks {
            if !task_ids.insert(task.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    path: path.to_path_buf(),
                    kind: "task",
                    id: task.id.clone(),
                });
            }
            check_task(task, path)?;
        }
        let mut bug_ids = HashSet::new();
        for bug in &self.bugs {
            if !bug_ids.insert(bug.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    path: path.to_path_buf(),
                    kind: "bug",
                    id: bug.id.clone(),
                });
            }
            if !task_ids.contains(bug.task_id.as_str()) {
                return Err(CorpusError::DanglingTask {
                    path: path.to_path_buf(),
                    bug_id: bug.id.clone(),
                    task_id: bug.task_id.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_alphanumeric())
}

fn check_task(task: &Task, path: &Path) -> Result<(), CorpusError> {
    if !is_identifier(&task.entry_function) {
        return Err(invalid(
            path,
            "entry_function",
            format!("'{}' is not a valid identifier", task.entry_function),
        ));
    }
    if task.suite.is_empty() {
        return Err(invalid(path, "tests", "test suite is empty"));
    }
    let mut seen = HashSet::new();
    for (i, case) in task.suite.iter().enumerate() {
        let field = |name: &str| format!("tests[{i}].{name}");
        if case.id.is_empty() {
            return Err(invalid(path, field("id"), "empty case id"));
        }
        if !seen.insert(case.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                kind: "test case",
                id: case.id.clone(),
            });
        }
        if case.timeout_ms < MIN_CASE_TIMEOUT_MS {
            return Err(invalid(
                path,
                field("timeout_ms"),
                format!("must be at least {MIN_CASE_TIMEOUT_MS}"),
            ));
        }
        if let CompareMode::FloatTol { eps } = case.compare_mode {
            if !(eps > 0.0) {
                return Err(invalid(path, field("compare_mode.eps"), "eps must be > 0"));
            }
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and structurally checks a corpus directory.
pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(CorpusError::MissingManifest(manifest_path));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CorpusError::SchemaVersion {
            path: manifest_path,
            found: manifest.schema_version,
        });
    }

    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut task_ids: HashMap<String, PathBuf> = HashMap::new();
    for rel in &manifest.tasks {
        let path = root.join(rel);
        let mut task: Task = read_json(&path)?;
        if let Some(file) = &task.prelude_file {
            let prelude_path = root.join(file);
            task.prelude = Some(fs::read_to_string(&prelude_path).map_err(io_err(&prelude_path))?);
        }
        check_task(&task, &path)?;
        if task_ids.insert(task.id.clone(), path.clone()).is_some() {
            return Err(CorpusError::DuplicateId {
                path,
                kind: "task",
                id: task.id,
            });
        }
        tasks.push(task);
    }

    let mut bugs = Vec::with_capacity(manifest.bugs.len());
    let mut bug_ids = HashSet::new();
    for rel in &manifest.bugs {
        let path = root.join(rel);
        let mut bug: BuggyProgram = read_json(&path)?;
        let source_path = path.with_extension("py");
        bug.source = fs::read_to_string(&source_path).map_err(io_err(&source_path))?;
        if !task_ids.contains_key(&bug.task_id) {
            return Err(CorpusError::DanglingTask {
                path,
                bug_id: bug.id,
                task_id: bug.task_id,
            });
        }
        if !bug_ids.insert(bug.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path,
                kind: "bug",
                id: bug.id,
            });
        }
        bugs.push(bug);
    }

    Ok(Corpus {
        name: manifest.name,
        tasks,
        bugs,
    })
}

/// Writes `corpus` under `root` in canonical form. Task files go to
/// `tasks/<id>.json`, bugs to `bugs/<id>.{py,json}`.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<(), CorpusError> {
    for dir in ["tasks", "bugs"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let manifest = Manifest {
        name: corpus.name.clone(),
        schema_version: SCHEMA_VERSION,
        tasks: corpus.tasks.iter().map(|t| format!("tasks/{}.json", t.id)).collect(),
        bugs: corpus.bugs.iter().map(|b| format!("bugs/{}.json", b.id)).collect(),
    };
    write_canonical(&root.join("manifest.json"), &manifest)?;
    for task in &corpus.tasks {
        let mut stored = task.clone();
        if let Some(file) = &task.prelude_file {
            stored.prelude = None;
            let path = root.join(file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let text = task.prelude.clone().unwrap_or_default();
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        write_canonical(&root.join(format!("tasks/{}.json", task.id)), &stored)?;
    }
    for bug in &corpus.bugs {
        let source_path = root.join(format!("bugs/{}.py", bug.id));
        fs::write(&source_path, &bug.source).map_err(io_err(&source_path))?;
        write_canonical(&root.join(format!("bugs/{}.json", bug.id)), bug)?;
    }
    Ok(())
}

fn write_canonical<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let text = to_canonical_json(value).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

/// Per-task and per-bug outcome of running the corpus through an executor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub corpus: String,
    pub tasks: Vec<TaskCheck>,
    pub bugs: Vec<BugCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCheck {
    pub task_id: String,
    /// `None` when the task has no reference solution.
    pub reference_passed: Option<bool>,
    pub reference_failing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugCheck {
    pub bug_id: String,
    pub task_id: String,
    pub failing_ids: Vec<String>,
    pub not_buggy: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.tasks.iter().all(|t| t.reference_passed != Some(false))
            && self.bugs.iter().all(|b| !b.not_buggy)
    }

    /// Human-readable problem list; empty when the corpus is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.tasks {
            if t.reference_passed == Some(false) {
                out.push(format!(
                    "task {}: reference solution fails {}",
                    t.task_id,
                    t.reference_failing.join(", ")
                ));
            }
        }
        for b in &self.bugs {
            if b.not_buggy {
                out.push(format!("bug {} (task {}): not buggy", b.bug_id, b.task_id));
            }
        }
        out
    }
}

/// Runs every reference solution and every bug through `executor`.
pub fn validate_corpus(
    corpus: &Corpus,
    executor: &dyn Executor,
    limits: Limits,
) -> Result<ValidationReport, SandboxError> {
    let with_reference: Vec<&Task> = corpus
        .tasks
        .iter()
        .filter(|t| t.reference_solution.is_some())
        .collect();
    let mut requests: Vec<ExecutionRequest> = with_reference
        .iter()
        .map(|t| t.execution_request(t.reference_solution.as_deref().unwrap_or(""), limits))
        .collect();
    let bug_tasks: Vec<&Task> = corpus
        .bugs
        .iter()
        .map(|b| corpus.task(&b.task_id).expect("corpus checked at load"))
        .collect();
    requests.extend(
        corpus
            .bugs
            .iter()
            .zip(&bug_tasks)
            .map(|(b, t)| t.execution_request(&b.source, limits)),
    );

    let mut verdicts = executor.run_parallel(&requests).into_iter();
    let mut report = ValidationReport {
        corpus: corpus.name.clone(),
        ..Default::default()
    };
    let reference_ids: BTreeSet<&str> = with_reference.iter().map(|t| t.id.as_str()).collect();
    let mut reference_verdicts: HashMap<&str, SuiteVerdict> = HashMap::new();
    for task in &with_reference {
        let v = verdicts.next().expect("one verdict per request")?;
        reference_verdicts.insert(task.id.as_str(), v);
    }
    for task in &corpus.tasks {
        let check = match reference_verdicts.remove(task.id.as_str()) {
            Some(v) => TaskCheck {
                task_id: task.id.clone(),
                reference_passed: Some(v.all_passed),
                reference_failing: v.failing_ids,
            },
            None => {
                debug_assert!(!reference_ids.contains(task.id.as_str()));
                TaskCheck {
                    task_id: task.id.clone(),
                    reference_passed: None,
                    reference_failing: Vec::new(),
                }
            }
        };
        report.tasks.push(check);
    }
    for bug in &corpus.bugs {
        let v = verdicts.next().expect("one verdict per request")?;
        report.bugs.push(BugCheck {
            bug_id: bug.id.clone(),
            task_id: bug.task_id.clone(),
            not_buggy: v.all_passed,
            failing_ids: v.failing_ids,
        });
    }
    Ok(report)
}

/// One failing case with the evidence captured for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingCase {
    pub case: TestCase,
    pub result: CaseResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailingTestSet {
    pub cases: Vec<FailingCase>,
}

impl FailingTestSet {
    pub fn ids(&self) -> Vec<&str> {
        self.cases.iter().map(|c| c.case.id.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("not buggy: program passes every test of task '{0}'")]
    NotBuggy(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("bug '{bug}' belongs to task '{expected}', not '{given}'")]
    TaskMismatch {
        bug: String,
        expected: String,
        given: String,
    },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// First `k` failing cases of the full suite, in suite order. Errors and
/// timeouts count as failing.
pub fn select_failing_tests(
    bug: &BuggyProgram,
    task: &Task,
    executor: &dyn Executor,
    k: usize,
    limits: Limits,
) -> Result<FailingTestSet, SelectError> {
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    if bug.task_id != task.id {
        return Err(SelectError::TaskMismatch {
            bug: bug.id.clone(),
            expected: bug.task_id.clone(),
            given: task.id.clone(),
        });
    }
    let verdict = executor.run_suite(&task.execution_request(&bug.source, limits))?;
    let set = failing_prefix(task, &verdict, k);
    if set.cases.is_empty() {
        return Err(SelectError::NotBuggy(task.id.clone()));
    }
    Ok(set)
}

/// Builds the failing set from an existing verdict.
pub fn failing_prefix(task: &Task, verdict: &SuiteVerdict, k: usize) -> FailingTestSet {
    let cases = verdict
        .results
        .iter()
        .filter(|r| r.status != crate::sandbox::CaseStatus::Pass)
        .filter_map(|r| {
            task.case(&r.case_id).map(|c| FailingCase {
                case: c.clone(),
                result: r.clone(),
            })
        })
        .take(k)
        .collect();
    FailingTestSet { cases }
}
