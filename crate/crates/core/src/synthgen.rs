//! Synthetic training data: teacher-generated buggy programs per mistake
//! type, (repair, explanation, hint) tuples validated by execution, and four
//! chat-format training instances per valid tuple.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    select_failing_tests, BuggyProgram, Corpus, FailingTestSet, Origin, SelectError, Split, Task,
};
use crate::gateway::{generate, Backend, GatewayError, Message, SamplingParams};
use crate::pipeline::{base_vars, extract_program, fenced_blocks, parse_hint_response};
use crate::prompts::{render, PromptBundle, PromptError};
use crate::pytokens::tokenize;
use crate::sandbox::{Executor, Limits, SandboxError};
use crate::util::to_canonical_json;

const BUILTIN_CATALOG: &str = include_str!("../prompts/mistakes.json");
pub const MAX_PROGRAMS_PER_RESPONSE: usize = 5;
pub const INSTANCES_PER_TUPLE: usize = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("teacher backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("executor: {0}")]
    Executor(#[from] SandboxError),
    #[error(transparent)]
    Select(SelectError),
    #[error("bug '{0}' passes every test; nothing to repair")]
    NotBuggy(String),
    #[error("bug '{bug}' refers to unknown task '{task}'")]
    UnknownTask { bug: String, task: String },
    #[error("tuple '{0}' is invalid and cannot be assembled")]
    InvalidTuple(String),
    #[error("bug '{0}' belongs to the evaluation split and must not appear in training data")]
    Leakage(String),
    #[error("tuple '{tuple}': target repair no longer passes task '{task}' (failing: {failing})")]
    Revalidation {
        tuple: String,
        task: String,
        failing: String,
    },
    #[error("percent must be in (0, 100], got {0}")]
    Percent(f64),
    #[error("mistake catalog: {0}")]
    Catalog(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MistakeType {
    pub id: String,
    pub description: String,
}

/// The default eight-entry catalog.
pub fn default_catalog() -> Vec<MistakeType> {
    serde_json::from_str(BUILTIN_CATALOG).expect("built-in catalog is valid")
}

pub fn load_catalog(path: &Path) -> Result<Vec<MistakeType>, SynthError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let catalog: Vec<MistakeType> = serde_json::from_str(&text).map_err(|source| SynthError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    if let Some(m) = catalog.iter().find(|m| m.description.trim().is_empty()) {
        return Err(SynthError::Catalog(format!("mistake '{}' has an empty description", m.id)));
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_tuples: u32,
    pub failing_k: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 2048,
            max_tuples: 5,
            failing_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTuple {
    pub id: String,
    pub bug_id: String,
    pub task_id: String,
    pub buggy_source: String,
    pub failing_tests: FailingTestSet,
    pub repaired_source: String,
    pub explanation: String,
    pub hint: String,
    pub valid: bool,
}

#[derive(Debug, Default)]
pub struct BuggyBatch {
    pub programs: Vec<BuggyProgram>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
pub struct TupleBatch {
    /// Parsed tuples, valid or not, in sample order.
    pub tuples: Vec<FeedbackTuple>,
    pub warnings: Vec<String>,
}

impl TupleBatch {
    pub fn valid(&self) -> impl Iterator<Item = &FeedbackTuple> {
        self.tuples.iter().filter(|t| t.valid)
    }
}

pub struct Synthesizer<'a> {
    pub teacher: &'a dyn Backend,
    pub executor: &'a dyn Executor,
    pub prompts: &'a PromptBundle,
    pub limits: Limits,
    pub config: SynthConfig,
}

impl<'a> Synthesizer<'a> {
    fn params(&self, n: u32) -> SamplingParams {
        SamplingParams::new(self.config.temperature, n, self.config.max_tokens)
    }

    /// One teacher call for `mistake`; keeps programs that lex cleanly and
    /// fail at least one test.
    pub fn generate_buggy_programs(&self, task: &Task, mistake: &MistakeType) -> Result<BuggyBatch, SynthError> {
        let mut batch = BuggyBatch::default();
        let vars = crate::prompts::Vars::new()
            .with("problem_description", &task.description)
            .with("mistake_description", &mistake.description)
            .with("entry_function", &task.entry_function);
        let messages = vec![
            Message::system(&self.prompts.buggy_programs_system),
            Message::user(render(&self.prompts.buggy_programs_template, &vars)?),
        ];
        let response = match generate(self.teacher, &messages, &self.params(1))?.into_first() {
            Ok(c) => c.text,
            Err(e) => {
                batch.warnings.push(format!("{}/{}: teacher call failed: {e}", task.id, mistake.id));
                return Ok(batch);
            }
        };

        let mut programs = fenced_blocks(&response);
        if programs.is_empty() {
            programs.extend(extract_program(&response, &task.entry_function));
        }
        let mut seen = HashSet::new();
        let candidates: Vec<(usize, String)> = programs
            .into_iter()
            .take(MAX_PROGRAMS_PER_RESPONSE)
            .enumerate()
            .filter(|(_, src)| !src.trim().is_empty() && !tokenize(src).had_errors)
            .filter(|(_, src)| seen.insert(src.clone()))
            .collect();
        let requests: Vec<_> = candidates
            .iter()
            .map(|(_, src)| task.execution_request(src, self.limits))
            .collect();
        for ((i, source), verdict) in candidates.into_iter().zip(self.executor.run_parallel(&requests)) {
            if verdict?.all_passed {
                continue;
            }
            batch.programs.push(BuggyProgram {
                id: format!("{}_syn_{}_{}", task.id, mistake.id, i + 1),
                task_id: task.id.clone(),
                source,
                origin: Origin::ModelGenerated,
                split: Split::Training,
            });
        }
        if batch.programs.is_empty() {
            batch
                .warnings
                .push(format!("{}/{}: no buggy program survived filtering", task.id, mistake.id));
        }
        Ok(batch)
    }

    /// Up to `max_tuples` independent teacher calls; each answer is parsed
    /// into (repair, explanation, hint) and the repair is validated.
    pub fn generate_tuples(&self, bug: &BuggyProgram, task: &Task, max_tuples: u32) -> Result<TupleBatch, SynthError> {
        let mut batch = TupleBatch::default();
        if max_tuples == 0 {
            return Ok(batch);
        }
        let failing = select_failing_tests(bug, task, self.executor, self.config.failing_k, self.limits)
            .map_err(|e| match e {
                SelectError::NotBuggy(_) => SynthError::NotBuggy(bug.id.clone()),
                SelectError::Sandbox(s) => SynthError::Executor(s),
                other => SynthError::Select(other),
            })?;
        let messages = teacher_messages(self.prompts, task, &bug.source, &failing)?;
        let generation = generate(self.teacher, &messages, &self.params(max_tuples))?;
        for f in &generation.failures {
            batch
                .warnings
                .push(format!("{}: teacher sample {} failed: {}", bug.id, f.sample_index, f.error));
        }

        let mut parsed = Vec::new();
        for c in &generation.completions {
            let program = fenced_blocks(&c.text)
                .into_iter()
                .next()
                .or_else(|| extract_program(&c.text, &task.entry_function));
            match (program, parse_hint_response(&c.text)) {
                (Some(p), Some(h)) => parsed.push((c.sample_index, p, h)),
                _ => batch
                    .warnings
                    .push(format!("{}: teacher sample {} could not be parsed", bug.id, c.sample_index)),
            }
        }
        let requests: Vec<_> = parsed
            .iter()
            .map(|(_, p, _)| task.execution_request(p, self.limits))
            .collect();
        for ((i, program, h), verdict) in parsed.into_iter().zip(self.executor.run_parallel(&requests)) {
            batch.tuples.push(FeedbackTuple {
                id: format!("{}_tuple{}", bug.id, i + 1),
                bug_id: bug.id.clone(),
                task_id: task.id.clone(),
                buggy_source: bug.source.clone(),
                failing_tests: failing.clone(),
                repaired_source: program,
                explanation: h.explanation,
                hint: h.hint,
                valid: verdict?.all_passed,
            });
        }
        Ok(batch)
    }

    /// Buggy programs for every (task, mistake) pair plus the corpus's own
    /// training bugs, then tuples for each of them.
    pub fn synthesize(&self, corpus: &Corpus, catalog: &[MistakeType]) -> Result<SynthOutcome, SynthError> {
        let mut out = SynthOutcome::default();
        let mut bugs: Vec<BuggyProgram> = corpus.bugs_in(Split::Training).cloned().collect();
        for task in &corpus.tasks {
            for mistake in catalog {
                let batch = self.generate_buggy_programs(task, mistake)?;
                out.warnings.extend(batch.warnings);
                bugs.extend(batch.programs);
            }
        }
        for bug in &bugs {
            let task = corpus.task(&bug.task_id).ok_or_else(|| SynthError::UnknownTask {
                bug: bug.id.clone(),
                task: bug.task_id.clone(),
            })?;
            match self.generate_tuples(bug, task, self.config.max_tuples) {
                Ok(batch) => {
                    out.warnings.extend(batch.warnings);
                    out.tuples.extend(batch.tuples);
                }
                Err(SynthError::NotBuggy(id)) => out.warnings.push(format!("{id}: passes every test, skipped")),
                Err(e) => return Err(e),
            }
        }
        out.bugs = bugs;
        Ok(out)
    }
}

#[derive(Debug, Default)]
pub struct SynthOutcome {
    pub bugs: Vec<BuggyProgram>,
    pub tuples: Vec<FeedbackTuple>,
    pub warnings: Vec<String>,
}

fn teacher_messages(
    prompts: &PromptBundle,
    task: &Task,
    buggy_source: &str,
    failing: &FailingTestSet,
) -> Result<Vec<Message>, PromptError> {
    Ok(vec![
        Message::system(&prompts.teacher_system),
        Message::user(render(&prompts.teacher_template, &base_vars(task, buggy_source, failing))?),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceType {
    Repair,
    Explanation,
    Hint,
    FullChain,
}

impl InstanceType {
    pub const ALL: [InstanceType; 4] = [
        InstanceType::Repair,
        InstanceType::Explanation,
        InstanceType::Hint,
        InstanceType::FullChain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceType::Repair => "repair",
            InstanceType::Explanation => "explanation",
            InstanceType::Hint => "hint",
            InstanceType::FullChain => "full_chain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub instance_type: InstanceType,
    pub tuple_id: String,
    pub bug_id: String,
    pub task_id: String,
    pub repaired_source: String,
}

/// One JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub messages: Vec<Message>,
    pub meta: InstanceMeta,
}

fn fenced(source: &str) -> String {
    format!("```python\n{}\n```", source.trim_end())
}

/// Four instances per tuple, in tuple order then type order. Inputs are
/// rendered with the same templates the pipeline uses at inference time.
pub fn assemble_instances(
    tuples: &[FeedbackTuple],
    tasks: &[Task],
    prompts: &PromptBundle,
) -> Result<Vec<TrainingInstance>, SynthError> {
    let mut out = Vec::with_capacity(tuples.len() * INSTANCES_PER_TUPLE);
    for t in tuples {
        if !t.valid {
            return Err(SynthError::InvalidTuple(t.id.clone()));
        }
        let task = tasks.iter().find(|x| x.id == t.task_id).ok_or_else(|| SynthError::UnknownTask {
            bug: t.bug_id.clone(),
            task: t.task_id.clone(),
        })?;
        let base = base_vars(task, &t.buggy_source, &t.failing_tests);
        let repair_prompt = render(&prompts.repair_template, &base)?;
        let with_repair = base.clone().with("repaired_program", t.repaired_source.trim_end());
        let explanation_prompt = render(
            &prompts.hint_template,
            &with_repair.clone().with("explanation_request", &prompts.explanation_only_request),
        )?;
        let hint_prompt = render(
            &prompts.hint_template,
            &with_repair.with("explanation_request", &prompts.explanation_request),
        )?;
        let chain_prompt = render(&prompts.teacher_template, &base)?;
        let labeled = format!("EXPLANATION: {}\nHINT: {}", t.explanation, t.hint);

        for kind in InstanceType::ALL {
            let (system, user, target) = match kind {
                InstanceType::Repair => (&prompts.repair_system, repair_prompt.clone(), fenced(&t.repaired_source)),
                InstanceType::Explanation => (
                    &prompts.hint_system,
                    explanation_prompt.clone(),
                    format!("EXPLANATION: {}", t.explanation),
                ),
                InstanceType::Hint => (&prompts.hint_system, hint_prompt.clone(), labeled.clone()),
                InstanceType::FullChain => (
                    &prompts.teacher_system,
                    chain_prompt.clone(),
                    format!("{}\n{labeled}", fenced(&t.repaired_source)),
                ),
            };
            out.push(TrainingInstance {
                messages: vec![Message::system(system), Message::user(user), Message::assistant(target)],
                meta: InstanceMeta {
                    instance_type: kind,
                    tuple_id: t.id.clone(),
                    bug_id: t.bug_id.clone(),
                    task_id: t.task_id.clone(),
                    repaired_source: t.repaired_source.clone(),
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub instances: usize,
    pub tuples: usize,
    pub bugs: usize,
    pub per_type: BTreeMap<String, usize>,
    pub per_task: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Writes one JSON object per line and returns the counts.
pub fn export_jsonl(instances: &[TrainingInstance], path: &Path) -> Result<ExportManifest, SynthError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|source| SynthError::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(count_instances(instances))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingInstance>, SynthError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| SynthError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn count_instances(instances: &[TrainingInstance]) -> ExportManifest {
    let mut m = ExportManifest::default();
    for kind in InstanceType::ALL {
        m.per_type.insert(kind.as_str().into(), 0);
    }
    let mut tuples = BTreeSet::new();
    let mut bugs = BTreeSet::new();
    for inst in instances {
        *m.per_type.entry(inst.meta.instance_type.as_str().into()).or_default() += 1;
        *m.per_task.entry(inst.meta.task_id.clone()).or_default() += 1;
        tuples.insert(inst.meta.tuple_id.as_str());
        bugs.insert(inst.meta.bug_id.as_str());
    }
    m.instances = instances.len();
    m.tuples = tuples.len();
    m.bugs = bugs.len();
    m
}

/// Indices of `ceil(percent/100 · n)` items drawn uniformly with a fixed
/// seed, returned in ascending order.
pub fn sample_percent(n: usize, percent: f64, seed: u64) -> Result<Vec<usize>, SynthError> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(SynthError::Percent(percent));
    }
    let k = ((percent / 100.0) * n as f64).ceil() as usize;
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    pub percent: Option<f64>,
    pub seed: u64,
}

/// Filters, revalidates, assembles and writes `instances.jsonl` plus
/// `manifest.json` under `out_dir`.
pub fn export_dataset(
    tuples: &[FeedbackTuple],
    corpus: &Corpus,
    prompts: &PromptBundle,
    executor: &dyn Executor,
    limits: Limits,
    out_dir: &Path,
    options: &ExportOptions,
) -> Result<ExportManifest, SynthError> {
    let evaluation: HashSet<&str> = corpus.bugs_in(Split::Evaluation).map(|b| b.id.as_str()).collect();
    if let Some(t) = tuples.iter().find(|t| evaluation.contains(t.bug_id.as_str())) {
        return Err(SynthError::Leakage(t.bug_id.clone()));
    }
    let valid: Vec<&FeedbackTuple> = tuples.iter().filter(|t| t.valid).collect();
    let chosen: Vec<FeedbackTuple> = match options.percent {
        Some(p) => sample_percent(valid.len(), p, options.seed)?
            .into_iter()
            .map(|i| valid[i].clone())
            .collect(),
        None => valid.into_iter().cloned().collect(),
    };

    revalidate(&chosen, corpus, executor, limits)?;
    let instances = assemble_instances(&chosen, &corpus.tasks, prompts)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = export_jsonl(&instances, &out_dir.join("instances.jsonl"))?;
    manifest.percent = options.percent;
    manifest.seed = options.percent.map(|_| options.seed);
    let path = out_dir.join("manifest.json");
    let text = to_canonical_json(&manifest).map_err(|source| SynthError::Json {
        path: path.clone(),
        line: 0,
        source,
    })?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Every target repair must still pass its task's full suite.
fn revalidate(tuples: &[FeedbackTuple], corpus: &Corpus, executor: &dyn Executor, limits: Limits) -> Result<(), SynthError> {
    let mut requests = Vec::with_capacity(tuples.len());
    for t in tuples {
        let task = corpus.task(&t.task_id).ok_or_else(|| SynthError::UnknownTask {
            bug: t.bug_id.clone(),
            task: t.task_id.clone(),
        })?;
        requests.push(task.execution_request(&t.repaired_source, limits));
    }
    for (t, verdict) in tuples.iter().zip(executor.run_parallel(&requests)) {
        let verdict = verdict?;
        if !verdict.all_passed {
            return Err(SynthError::Revalidation {
                tuple: t.id.clone(),
                task: t.task_id.clone(),
                failing: verdict.failing_ids.join(", "),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_eight_entries() {
        let c = default_catalog();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|m| !m.description.is_empty()));
        assert!(c.iter().any(|m| m.id == "loop_range"));
    }

    #[test]
    fn percent_sampling() {
        let half = sample_percent(7, 50.0, 42).unwrap();
        assert_eq!(half.len(), 4);
        assert_eq!(half, sample_percent(7, 50.0, 42).unwrap());
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_percent(10, 100.0, 1).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_percent(0, 50.0, 1).unwrap(), Vec::<usize>::new());
        assert_eq!(sample_percent(826, 25.0, 9).unwrap().len(), 207);
        assert!(sample_percent(3, 0.0, 1).is_err());
        assert!(sample_percent(3, 101.0, 1).is_err());
    }
}
