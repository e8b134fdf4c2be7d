//! The feedback technique: failing tests, sampled repairs validated against
//! the full suite, closest-repair selection, then a hint with a detailed
//! explanation. Only the hint is meant for learners.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{select_failing_tests, BuggyProgram, FailingTestSet, SelectError, Task};
use crate::gateway::{
    cost_of, generate, Backend, BackendClass, Completion, GatewayError, Message, PricingTable,
    SamplingParams,
};
use crate::prompts::{render_failing_tests, PromptBundle, PromptError, Vars, DEFAULT_PROMPT_SET};
use crate::pytokens::{token_edit_distance, tokenize, TokenStream};
use crate::sandbox::{Executor, Limits, SandboxError, SuiteVerdict};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_r: u32,
    pub t_r: f64,
    pub t_h: f64,
    pub failing_k: usize,
    pub max_tokens_repair: u32,
    pub max_tokens_hint: u32,
    pub prompt_set: String,
    /// Base seed forwarded to backends that support seeded sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_r: 10,
            t_r: 0.7,
            t_h: 0.1,
            failing_k: 3,
            max_tokens_repair: 1024,
            max_tokens_hint: 512,
            prompt_set: DEFAULT_PROMPT_SET.into(),
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_r == 0 {
            return Err(PipelineError::Config("n_r must be at least 1".into()));
        }
        if self.failing_k == 0 {
            return Err(PipelineError::Config("failing_k must be at least 1".into()));
        }
        for (name, params) in [("repair", self.repair_params()), ("hint", self.hint_params())] {
            params
                .validate()
                .map_err(|e| PipelineError::Config(format!("{name} sampling: {e}")))?;
        }
        Ok(())
    }

    fn repair_params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.t_r,
            n: self.n_r,
            max_tokens: self.max_tokens_repair,
            seed: self.seed,
        }
    }

    fn hint_params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.t_h,
            n: 1,
            max_tokens: self.max_tokens_hint,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("not buggy: the program passes every test of task '{0}'")]
    NotBuggy(String),
    #[error("{stage} stage: {source}")]
    Prompt {
        stage: Stage,
        #[source]
        source: PromptError,
    },
    #[error("{stage} stage: backend: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("{stage} stage: executor: {source}")]
    Executor {
        stage: Stage,
        #[source]
        source: SandboxError,
    },
    #[error("hint stage: response has no EXPLANATION:/HINT: sections after a reprompt; raw response: {raw}")]
    UnparseableHint { raw: String },
    #[error("{0}")]
    Input(String),
}

impl PipelineError {
    /// Backend failures that may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        matches!(self, PipelineError::Backend { source, .. } if source.is_retriable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FailingTests,
    Repair,
    Hint,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::FailingTests => "failing-tests",
            Stage::Repair => "repair",
            Stage::Hint => "hint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTelemetry {
    pub stage: Stage,
    pub model_calls: u32,
    pub failed_calls: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Wall-clock time of the whole stage.
    pub latency_ms: u64,
    pub usd_cost: f64,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl StageTelemetry {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            model_calls: 0,
            failed_calls: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
            usd_cost: 0.0,
            degraded: false,
            errors: Vec::new(),
        }
    }

    fn add_calls(&mut self, completions: &[Completion], pricing: &PricingTable) -> Result<(), GatewayError> {
        self.model_calls += completions.len() as u32;
        self.prompt_tokens += completions.iter().map(|c| c.prompt_tokens).sum::<u64>();
        self.completion_tokens += completions.iter().map(|c| c.completion_tokens).sum::<u64>();
        self.usd_cost += cost_of(completions, pricing)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub backend_id: String,
    pub backend_class: BackendClass,
    pub total_latency_ms: u64,
    pub usd_cost: f64,
    pub degraded: bool,
    pub stages: Vec<StageTelemetry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sample_index: u32,
    /// Program extracted from the response; absent when none was found or
    /// the call failed.
    pub source: Option<String>,
    pub verdict: Option<SuiteVerdict>,
    pub edit_distance: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRepair {
    pub sample_index: u32,
    pub source: String,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub candidates: Vec<Candidate>,
    pub selected: Option<SelectedRepair>,
    pub empty: bool,
}

impl RepairOutcome {
    pub fn passing(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates
            .iter()
            .filter(|c| c.verdict.as_ref().is_some_and(|v| v.all_passed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintOutput {
    pub explanation: String,
    pub hint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub schema_version: u32,
    pub task_id: String,
    pub bug_id: String,
    pub buggy_source: String,
    pub failing_tests: FailingTestSet,
    pub repair: RepairOutcome,
    pub explanation: String,
    pub hint: String,
    pub telemetry: Telemetry,
    pub config_used: PipelineConfig,
}

impl FeedbackBundle {
    /// Copy with every wall-clock field zeroed, for golden comparisons.
    pub fn without_timings(&self) -> Self {
        let mut b = self.clone();
        b.telemetry.total_latency_ms = 0;
        for s in &mut b.telemetry.stages {
            s.latency_ms = 0;
        }
        for fc in &mut b.failing_tests.cases {
            fc.result.duration_ms = 0;
        }
        for c in &mut b.repair.candidates {
            if let Some(v) = &mut c.verdict {
                v.clear_timings();
            }
        }
        b
    }

    /// Whether the pass@n_r event happened for this instance.
    pub fn repair_found(&self) -> bool {
        !self.repair.empty
    }
}

/// First fenced code block; otherwise the longest run of code-like lines
/// that lexes cleanly and defines `entry_function`; otherwise `None`.
pub fn extract_program(response: &str, entry_function: &str) -> Option<String> {
    if let Some(block) = fenced_blocks(response).into_iter().next() {
        return Some(block);
    }
    let lines: Vec<&str> = response.lines().collect();
    let mut best: Option<(usize, String)> = None;
    let mut i = 0;
    while i < lines.len() {
        if !is_code_like(lines[i]) || lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let start = i;
        while i < lines.len() && is_code_like(lines[i]) {
            i += 1;
        }
        let mut end = i;
        while end > start && lines[end - 1].trim().is_empty() {
            end -= 1;
        }
        let run = dedent(&lines[start..end]);
        let defines = run
            .lines()
            .any(|l| l.starts_with(&format!("def {entry_function}(")) || l.starts_with(&format!("def {entry_function} (")));
        if defines && !tokenize(&run).had_errors {
            let len = end - start;
            if best.as_ref().is_none_or(|(n, _)| len > *n) {
                best = Some((len, run));
            }
        }
    }
    best.map(|(_, run)| run)
}

/// Interiors of all ``` fenced blocks, in order. Unclosed fences run to the end.
pub fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(body), true) => {
                blocks.push(join_lines(body));
                current = None;
            }
            (Some(body), false) => body.push(line),
            (None, false) => {}
        }
    }
    if let Some(body) = current {
        if !body.is_empty() {
            blocks.push(join_lines(&body));
        }
    }
    blocks
}

fn join_lines(lines: &[&str]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

const CODE_STARTS: &[&str] = &[
    "def ", "class ", "import ", "from ", "return", "if ", "elif ", "else:", "for ", "while ", "try:",
    "except", "finally:", "with ", "pass", "break", "continue", "raise", "assert ", "global ", "nonlocal ",
    "@", "#", "print(",
];

fn is_code_like(line: &str) -> bool {
    if line.trim().is_empty() || line.starts_with(' ') || line.starts_with('\t') {
        return true;
    }
    if CODE_STARTS.iter().any(|p| line.starts_with(p)) {
        return true;
    }
    // assignment or call statement: `name[...] = ...`, `name.attr(...)`
    let head: String = line
        .chars()
        .take_while(|c| c.is_alphanumeric() || matches!(c, '_' | '.' | '[' | ']' | ',' | ' '))
        .collect();
    let rest = line[head.len()..].trim_start();
    let ident_head = head.trim().chars().next().is_some_and(|c| c.is_alphabetic() || c == '_');
    ident_head
        && !head.trim().contains(' ')
        && (rest.starts_with('(')
            || (rest.starts_with('=') && !rest.starts_with("=="))
            || ["+=", "-=", "*=", "/=", "%=", "//="].iter().any(|op| rest.starts_with(op)))
}

fn dedent(lines: &[&str]) -> String {
    let indent = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    let body: Vec<&str> = lines
        .iter()
        .map(|l| if l.trim().is_empty() { "" } else { &l[indent..] })
        .collect();
    join_lines(&body)
}

/// Splits a labeled response into (explanation, hint).
pub fn parse_hint_response(text: &str) -> Option<HintOutput> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Explanation,
        Hint,
    }
    let mut section = Section::None;
    let (mut explanation, mut hint) = (Vec::new(), Vec::new());
    let (mut saw_x, mut saw_h) = (false, false);
    for line in text.lines() {
        let stripped = line.trim_start().trim_start_matches(['*', '#', ' ']);
        if let Some(rest) = strip_label(stripped, "EXPLANATION") {
            section = Section::Explanation;
            saw_x = true;
            explanation.push(rest);
            continue;
        }
        if let Some(rest) = strip_label(stripped, "HINT") {
            section = Section::Hint;
            saw_h = true;
            hint.push(rest);
            continue;
        }
        match section {
            Section::Explanation => explanation.push(line),
            Section::Hint => hint.push(line),
            Section::None => {}
        }
    }
    let explanation = explanation.join("\n").trim().to_string();
    let hint = hint.join("\n").trim().to_string();
    (saw_x && saw_h && !explanation.is_empty() && !hint.is_empty()).then_some(HintOutput { explanation, hint })
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let head = line.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = line[label.len()..].trim_start_matches('*').trim_start();
    rest.strip_prefix(':').map(|r| r.trim_start_matches('*').trim())
}

/// Collaborators for running the technique on one backend.
pub struct Pipeline<'a> {
    pub backend: &'a dyn Backend,
    pub executor: &'a dyn Executor,
    pub prompts: &'a PromptBundle,
    pub pricing: &'a PricingTable,
    pub limits: Limits,
}

impl<'a> Pipeline<'a> {
    pub fn repair_messages(&self, task: &Task, bug: &BuggyProgram, failing: &FailingTestSet) -> Result<Vec<Message>, PromptError> {
        let vars = base_vars(task, &bug.source, failing);
        Ok(vec![
            Message::system(&self.prompts.repair_system),
            Message::user(crate::prompts::render(&self.prompts.repair_template, &vars)?),
        ])
    }

    pub fn hint_messages(
        &self,
        task: &Task,
        bug: &BuggyProgram,
        failing: &FailingTestSet,
        repaired: Option<&str>,
    ) -> Result<Vec<Message>, PromptError> {
        let mut vars = base_vars(task, &bug.source, failing);
        vars.set("explanation_request", &self.prompts.explanation_request);
        if let Some(src) = repaired {
            vars.set("repaired_program", src.trim_end());
        }
        Ok(vec![
            Message::system(&self.prompts.hint_system),
            Message::user(crate::prompts::render(&self.prompts.hint_template, &vars)?),
        ])
    }

    /// Samples `n_r` candidates, validates each on the full suite and keeps
    /// the passing one closest to the buggy program.
    pub fn generate_repair(
        &self,
        task: &Task,
        bug: &BuggyProgram,
        failing: &FailingTestSet,
        cfg: &PipelineConfig,
    ) -> Result<(RepairOutcome, StageTelemetry), PipelineError> {
        let started = Instant::now();
        let mut tel = StageTelemetry::new(Stage::Repair);
        let messages = self
            .repair_messages(task, bug, failing)
            .map_err(|source| PipelineError::Prompt { stage: Stage::Repair, source })?;
        let generation = generate(self.backend, &messages, &cfg.repair_params())
            .map_err(|source| PipelineError::Backend { stage: Stage::Repair, source })?;
        tel.add_calls(&generation.completions, self.pricing)
            .map_err(|source| PipelineError::Backend { stage: Stage::Repair, source })?;
        tel.failed_calls = generation.failures.len() as u32;
        tel.degraded = generation.is_degraded();
        tel.errors = generation.failures.iter().map(|f| f.error.to_string()).collect();

        let mut candidates: Vec<Candidate> = (0..cfg.n_r)
            .map(|i| Candidate {
                sample_index: i,
                source: None,
                verdict: None,
                edit_distance: None,
                note: None,
            })
            .collect();
        for f in &generation.failures {
            candidates[f.sample_index as usize].note = Some(format!("backend failure: {}", f.error));
        }
        for c in &generation.completions {
            let slot = &mut candidates[c.sample_index as usize];
            match extract_program(&c.text, &task.entry_function) {
                Some(src) => slot.source = Some(src),
                None => slot.note = Some("no program found in response".into()),
            }
        }

        let to_run: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].source.is_some()).collect();
        let requests: Vec<_> = to_run
            .iter()
            .map(|&i| task.execution_request(candidates[i].source.as_deref().unwrap_or_default(), self.limits))
            .collect();
        let verdicts = self.executor.run_parallel(&requests);
        let buggy_tokens = tokenize(&bug.source);
        for (&i, verdict) in to_run.iter().zip(verdicts) {
            let verdict = verdict.map_err(|source| PipelineError::Executor { stage: Stage::Repair, source })?;
            let cand = &mut candidates[i];
            let tokens = tokenize(cand.source.as_deref().unwrap_or_default());
            cand.edit_distance = Some(token_edit_distance(&buggy_tokens, &tokens));
            cand.verdict = Some(verdict);
        }

        let outcome = select_closest(candidates);
        tel.latency_ms = started.elapsed().as_millis() as u64;
        Ok((outcome, tel))
    }

    /// One call at `t_h`; one reprompt if the answer lacks the labeled sections.
    pub fn generate_hint(
        &self,
        task: &Task,
        bug: &BuggyProgram,
        repair: &RepairOutcome,
        failing: &FailingTestSet,
        cfg: &PipelineConfig,
    ) -> Result<(HintOutput, StageTelemetry), PipelineError> {
        let started = Instant::now();
        let mut tel = StageTelemetry::new(Stage::Hint);
        let repaired = repair.selected.as_ref().map(|s| s.source.as_str());
        let mut messages = self
            .hint_messages(task, bug, failing, repaired)
            .map_err(|source| PipelineError::Prompt { stage: Stage::Hint, source })?;
        let params = cfg.hint_params();
        let backend_err = |source| PipelineError::Backend { stage: Stage::Hint, source };

        let first = generate(self.backend, &messages, &params)
            .map_err(backend_err)?
            .into_first()
            .map_err(backend_err)?;
        tel.add_calls(std::slice::from_ref(&first), self.pricing).map_err(backend_err)?;
        let parsed = match parse_hint_response(&first.text) {
            Some(p) => p,
            None => {
                messages.push(Message::assistant(&first.text));
                messages.push(Message::user(&self.prompts.format_reminder));
                let second = generate(self.backend, &messages, &params)
                    .map_err(backend_err)?
                    .into_first()
                    .map_err(backend_err)?;
                tel.add_calls(std::slice::from_ref(&second), self.pricing).map_err(backend_err)?;
                parse_hint_response(&second.text).ok_or(PipelineError::UnparseableHint { raw: second.text })?
            }
        };
        tel.latency_ms = started.elapsed().as_millis() as u64;
        Ok((parsed, tel))
    }

    /// Failing tests, repair, hint. A program that passes everything is
    /// rejected before any model call.
    pub fn run_feedback(&self, task: &Task, bug: &BuggyProgram, cfg: &PipelineConfig) -> Result<FeedbackBundle, PipelineError> {
        cfg.validate()?;
        let started = Instant::now();
        let failing = match select_failing_tests(bug, task, self.executor, cfg.failing_k, self.limits) {
            Ok(f) => f,
            Err(SelectError::NotBuggy(id)) => return Err(PipelineError::NotBuggy(id)),
            Err(SelectError::Sandbox(source)) => {
                return Err(PipelineError::Executor { stage: Stage::FailingTests, source })
            }
            Err(e) => return Err(PipelineError::Input(e.to_string())),
        };
        let (repair, repair_tel) = self.generate_repair(task, bug, &failing, cfg)?;
        let (hint, hint_tel) = self.generate_hint(task, bug, &repair, &failing, cfg)?;
        let stages = vec![repair_tel, hint_tel];
        let telemetry = Telemetry {
            backend_id: self.backend.id().to_string(),
            backend_class: self.backend.class(),
            total_latency_ms: started.elapsed().as_millis() as u64,
            usd_cost: stages.iter().map(|s| s.usd_cost).sum(),
            degraded: stages.iter().any(|s| s.degraded),
            stages,
        };
        Ok(FeedbackBundle {
            schema_version: BUNDLE_SCHEMA_VERSION,
            task_id: task.id.clone(),
            bug_id: bug.id.clone(),
            buggy_source: bug.source.clone(),
            failing_tests: failing,
            repair,
            explanation: hint.explanation,
            hint: hint.hint,
            telemetry,
            config_used: cfg.clone(),
        })
    }
}

pub(crate) fn base_vars(task: &Task, buggy_source: &str, failing: &FailingTestSet) -> Vars {
    Vars::new()
        .with("problem_description", &task.description)
        .with("failing_test_cases", render_failing_tests(&task.entry_function, failing))
        .with("buggy_program", buggy_source.trim_end())
        .with("entry_function", &task.entry_function)
}

/// Minimum edit distance among passing candidates; lowest sample index on ties.
pub fn select_closest(candidates: Vec<Candidate>) -> RepairOutcome {
    let selected = candidates
        .iter()
        .filter(|c| c.verdict.as_ref().is_some_and(|v| v.all_passed))
        .filter_map(|c| Some((c.edit_distance?, c.sample_index, c.source.clone()?)))
        .min_by_key(|(d, i, _)| (*d, *i))
        .map(|(edit_distance, sample_index, source)| SelectedRepair {
            sample_index,
            source,
            edit_distance,
        });
    RepairOutcome {
        empty: selected.is_none(),
        candidates,
        selected,
    }
}

/// Token edit distance between two sources.
pub fn program_distance(a: &str, b: &str) -> usize {
    let (ta, tb): (TokenStream, TokenStream) = (tokenize(a), tokenize(b));
    token_edit_distance(&ta, &tb)
}
