//! Benchmark runner and metrics: RPass and REdit over repeated runs, human
//! hint ratings with HGood aggregation, two-rater agreement, minEdit, and
//! report rendering from stored bundles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BuggyProgram, Corpus, Split};
use crate::gateway::{Backend, BackendClass, PricingTable};
use crate::pipeline::{FeedbackBundle, Pipeline, PipelineConfig};
use crate::prompts::PromptBundle;
use crate::pytokens::source_edit_distance;
use crate::sandbox::{Executor, Limits};
use crate::util::{map_bounded, mean_stderr, to_canonical_json};

/// Domain label used for the block that pools every domain.
pub const ALL_DOMAINS: &str = "all";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error("no ratings")]
    NoRatings,
    #[error("duplicate rating for instance '{instance}' by rater '{rater}'")]
    DuplicateRating { instance: String, rater: String },
    #[error("instance '{0}' has ratings from several raters; choose a primary rater")]
    AmbiguousRater(String),
    #[error("ratings line {line}: {message}")]
    RatingFormat { line: usize, message: String },
    #[error("no rating pairs")]
    NoPairs,
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> EvalError + '_ {
    move |source| EvalError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// One (bug, run) pair as persisted by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInstance {
    pub instance_id: String,
    pub domain: String,
    pub bug_id: String,
    pub task_id: String,
    pub run: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<FeedbackBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StoredInstance {
    pub fn repair_found(&self) -> bool {
        self.bundle.as_ref().is_some_and(FeedbackBundle::repair_found)
    }

    pub fn file_name(&self) -> String {
        format!("{}.json", self.instance_id)
    }
}

pub fn instance_id(bug_id: &str, run: u32) -> String {
    format!("{bug_id}.run{run}")
}

pub struct BenchmarkSpec<'a> {
    pub corpora: &'a [Corpus],
    pub config: &'a PipelineConfig,
    pub backend: &'a dyn Backend,
    pub executor: &'a dyn Executor,
    pub prompts: &'a PromptBundle,
    pub pricing: &'a PricingTable,
    pub limits: Limits,
    pub runs: u32,
    pub workers: usize,
}

/// Runs the pipeline for every evaluation bug and run, persists one file per
/// instance under `out_dir`, and returns the instances sorted by (domain,
/// bug, run). Run `r` samples with seed `base + r`.
pub fn run_benchmark(spec: &BenchmarkSpec<'_>, out_dir: &Path) -> Result<Vec<StoredInstance>, EvalError> {
    if spec.runs == 0 {
        return Err(EvalError::ZeroRuns);
    }
    let base_seed = spec.config.seed.unwrap_or(0);
    let mut jobs = Vec::new();
    for corpus in spec.corpora {
        for bug in corpus.bugs_in(Split::Evaluation) {
            for run in 1..=spec.runs {
                jobs.push((corpus, bug, run));
            }
        }
    }
    let pipeline = Pipeline {
        backend: spec.backend,
        executor: spec.executor,
        prompts: spec.prompts,
        pricing: spec.pricing,
        limits: spec.limits,
    };
    let mut instances = map_bounded(&jobs, spec.workers.max(1), |_, &(corpus, bug, run)| {
        let seed = base_seed + u64::from(run);
        let cfg = PipelineConfig {
            seed: Some(seed),
            ..spec.config.clone()
        };
        let mut inst = StoredInstance {
            instance_id: instance_id(&bug.id, run),
            domain: corpus.name.clone(),
            bug_id: bug.id.clone(),
            task_id: bug.task_id.clone(),
            run,
            seed: Some(seed),
            bundle: None,
            error: None,
        };
        let outcome = match corpus.task(&bug.task_id) {
            Some(task) => pipeline.run_feedback(task, bug, &cfg).map_err(|e| e.to_string()),
            None => Err(format!("unknown task '{}'", bug.task_id)),
        };
        match outcome {
            Ok(b) => inst.bundle = Some(b),
            Err(e) => {
                tracing::warn!(instance = %inst.instance_id, error = %e, "benchmark instance failed");
                inst.error = Some(e);
            }
        }
        inst
    });

    sort_instances(&mut instances);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for inst in &instances {
        let path = out_dir.join(inst.file_name());
        let text = to_canonical_json(inst).map_err(json_err(&path))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(instances)
}

/// Reads every stored instance under `dir`, sorted by (domain, bug, run).
pub fn load_instances(dir: &Path) -> Result<Vec<StoredInstance>, EvalError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        out.push(serde_json::from_str::<StoredInstance>(&text).map_err(json_err(&path))?);
    }
    sort_instances(&mut out);
    Ok(out)
}

fn sort_instances(instances: &mut [StoredInstance]) {
    instances.sort_by(|a, b| (&a.domain, &a.bug_id, a.run).cmp(&(&b.domain, &b.bug_id, b.run)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: u32,
    pub instances: usize,
    pub repaired: usize,
    pub errors: usize,
    pub rpass_pct: f64,
    /// Mean REdit over instances with a repair; absent when none was found.
    pub redit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairMetrics {
    pub runs: usize,
    pub rpass_pct: f64,
    pub rpass_stderr: f64,
    pub redit_mean: Option<f64>,
    pub redit_stderr: Option<f64>,
    pub per_run: Vec<RunMetrics>,
}

/// Per-run RPass/REdit, then mean and stderr across runs. Errored
/// instances stay in the denominator.
pub fn repair_metrics(instances: &[&StoredInstance]) -> RepairMetrics {
    let mut by_run: BTreeMap<u32, Vec<&StoredInstance>> = BTreeMap::new();
    for inst in instances {
        by_run.entry(inst.run).or_default().push(inst);
    }
    let per_run: Vec<RunMetrics> = by_run
        .into_iter()
        .map(|(run, insts)| {
            let distances: Vec<f64> = insts
                .iter()
                .filter_map(|i| i.bundle.as_ref()?.repair.selected.as_ref())
                .map(|s| s.edit_distance as f64)
                .collect();
            let repaired = insts.iter().filter(|i| i.repair_found()).count();
            RunMetrics {
                run,
                instances: insts.len(),
                repaired,
                errors: insts.iter().filter(|i| i.error.is_some()).count(),
                rpass_pct: 100.0 * repaired as f64 / insts.len() as f64,
                redit: (!distances.is_empty()).then(|| mean_stderr(&distances).0),
            }
        })
        .collect();
    let rpass: Vec<f64> = per_run.iter().map(|r| r.rpass_pct).collect();
    let redit: Vec<f64> = per_run.iter().filter_map(|r| r.redit).collect();
    let (rpass_pct, rpass_stderr) = mean_stderr(&rpass);
    let redit_stats = (!redit.is_empty()).then(|| mean_stderr(&redit));
    RepairMetrics {
        runs: per_run.len(),
        rpass_pct,
        rpass_stderr,
        redit_mean: redit_stats.map(|s| s.0),
        redit_stderr: redit_stats.map(|s| s.1),
        per_run,
    }
}

/// Selected repairs whose stored REdit disagrees with a fresh token
/// distance between the stored sources, as (instance, stored, recomputed).
pub fn redit_mismatches(instances: &[StoredInstance]) -> Vec<(String, usize, usize)> {
    instances
        .iter()
        .filter_map(|inst| {
            let b = inst.bundle.as_ref()?;
            let sel = b.repair.selected.as_ref()?;
            let d = source_edit_distance(&b.buggy_source, &sel.source);
            (d != sel.edit_distance).then(|| (inst.instance_id.clone(), sel.edit_distance, d))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintRating {
    pub instance_id: String,
    pub rater_id: String,
    pub hcorrect: u8,
    pub hinformative: u8,
    pub hconceal: u8,
    pub hcomprehensible: u8,
}

impl HintRating {
    pub fn attributes(&self) -> [u8; 4] {
        [self.hcorrect, self.hinformative, self.hconceal, self.hcomprehensible]
    }

    pub fn hgood(&self) -> bool {
        self.attributes().iter().all(|&a| a == 1)
    }
}

/// Parses the ratings CSV (header
/// `instance_id,rater_id,hcorrect,hinformative,hconceal,hcomprehensible`).
pub fn parse_ratings<R: Read>(reader: R) -> Result<Vec<HintRating>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<HintRating>().enumerate() {
        let line = i + 2;
        let rating = row.map_err(|e| EvalError::RatingFormat {
            line,
            message: e.to_string(),
        })?;
        if rating.attributes().iter().any(|&a| a > 1) {
            return Err(EvalError::RatingFormat {
                line,
                message: "attributes must be 0 or 1".into(),
            });
        }
        out.push(rating);
    }
    Ok(out)
}

pub fn load_ratings(path: &Path) -> Result<Vec<HintRating>, EvalError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_ratings(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HGoodSummary {
    pub rated: usize,
    pub hgood_pct: f64,
    pub hcorrect_pct: f64,
    pub hinformative_pct: f64,
    pub hconceal_pct: f64,
    pub hcomprehensible_pct: f64,
}

/// Keeps one rating per instance: the primary rater's when given, otherwise
/// the only rater's.
pub fn primary_ratings<'r>(ratings: &'r [HintRating], primary: Option<&str>) -> Result<Vec<&'r HintRating>, EvalError> {
    let mut seen = BTreeSet::new();
    let mut by_instance: BTreeMap<&str, Vec<&HintRating>> = BTreeMap::new();
    for r in ratings {
        if !seen.insert((r.instance_id.as_str(), r.rater_id.as_str())) {
            return Err(EvalError::DuplicateRating {
                instance: r.instance_id.clone(),
                rater: r.rater_id.clone(),
            });
        }
        if primary.is_none_or(|p| p == r.rater_id) {
            by_instance.entry(&r.instance_id).or_default().push(r);
        }
    }
    by_instance
        .into_iter()
        .map(|(id, rs)| match rs.as_slice() {
            [one] => Ok(*one),
            _ => Err(EvalError::AmbiguousRater(id.to_string())),
        })
        .collect()
}

/// HGood is the AND of the four attributes; percentages are over rated
/// instances.
pub fn aggregate_hgood(ratings: &[&HintRating]) -> Result<HGoodSummary, EvalError> {
    if ratings.is_empty() {
        return Err(EvalError::NoRatings);
    }
    let n = ratings.len() as f64;
    let pct = |f: &dyn Fn(&HintRating) -> bool| 100.0 * ratings.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(HGoodSummary {
        rated: ratings.len(),
        hgood_pct: pct(&|r| r.hgood()),
        hcorrect_pct: pct(&|r| r.hcorrect == 1),
        hinformative_pct: pct(&|r| r.hinformative == 1),
        hconceal_pct: pct(&|r| r.hconceal == 1),
        hcomprehensible_pct: pct(&|r| r.hcomprehensible == 1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Both raters said 1.
    pub a: u64,
    /// Rater 1 said 1, rater 2 said 0.
    pub b: u64,
    /// Rater 1 said 0, rater 2 said 1.
    pub c: u64,
    /// Both raters said 0.
    pub d: u64,
    pub p_o: f64,
    pub p_e: f64,
    /// Absent when chance agreement is 1.
    pub kappa: Option<f64>,
    pub degenerate: bool,
}

/// Two-rater binary kappa from the 2x2 table. The ratio is formed from
/// integer counts so that tables with exact rational kappa round once.
pub fn cohens_kappa(pairs: &[(bool, bool)]) -> Result<AgreementReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let (mut a, mut b, mut c, mut d) = (0u64, 0u64, 0u64, 0u64);
    for &pair in pairs {
        match pair {
            (true, true) => a += 1,
            (true, false) => b += 1,
            (false, true) => c += 1,
            (false, false) => d += 1,
        }
    }
    let n = i128::from(a + b + c + d);
    let (ai, bi, ci, di) = (i128::from(a), i128::from(b), i128::from(c), i128::from(d));
    let agree = n * (ai + di);
    let chance = (ai + bi) * (ai + ci) + (ci + di) * (bi + di);
    let total = n * n;
    let degenerate = chance == total;
    Ok(AgreementReport {
        a,
        b,
        c,
        d,
        p_o: agree as f64 / total as f64,
        p_e: chance as f64 / total as f64,
        kappa: (!degenerate).then(|| (agree - chance) as f64 / (total - chance) as f64),
        degenerate,
    })
}

/// Agreement on HGood between two raters over the instances both rated.
pub fn hgood_agreement(ratings: &[HintRating], rater_1: &str, rater_2: &str) -> Result<AgreementReport, EvalError> {
    let of = |rater: &str| -> HashMap<&str, bool> {
        ratings
            .iter()
            .filter(|r| r.rater_id == rater)
            .map(|r| (r.instance_id.as_str(), r.hgood()))
            .collect()
    };
    let (r1, r2) = (of(rater_1), of(rater_2));
    let mut ids: Vec<&&str> = r1.keys().filter(|k| r2.contains_key(**k)).collect();
    ids.sort();
    let pairs: Vec<(bool, bool)> = ids.into_iter().map(|id| (r1[*id], r2[*id])).collect();
    cohens_kappa(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinEditReport {
    pub per_bug: Vec<(String, usize)>,
    pub mean: f64,
    pub stderr: f64,
}

/// For each evaluation bug, the token distance to its closest training bug.
pub fn compute_min_edit(eval: &[BuggyProgram], training: &[BuggyProgram]) -> Result<MinEditReport, EvalError> {
    if eval.is_empty() {
        return Err(EvalError::EmptySet("evaluation"));
    }
    if training.is_empty() {
        return Err(EvalError::EmptySet("training"));
    }
    let per_bug: Vec<(String, usize)> = eval
        .iter()
        .map(|e| {
            let min = training
                .iter()
                .map(|t| source_edit_distance(&e.source, &t.source))
                .min()
                .unwrap_or(0);
            (e.id.clone(), min)
        })
        .collect();
    let values: Vec<f64> = per_bug.iter().map(|(_, d)| *d as f64).collect();
    let (mean, stderr) = mean_stderr(&values);
    Ok(MinEditReport { per_bug, mean, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub instances: usize,
    pub errors: usize,
    pub rated: usize,
    pub hgood_pct: Option<f64>,
    pub rpass_pct: f64,
    pub rpass_stderr: f64,
    pub redit_mean: Option<f64>,
    pub redit_stderr: Option<f64>,
    /// Mean per completed instance.
    pub usd_cost_mean: f64,
    pub latency_s_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backends: Vec<String>,
    pub backend_class: Option<BackendClass>,
    pub n_r: Option<u32>,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub domains: Vec<DomainRow>,
    pub all: DomainRow,
    /// Errored instances, flagged by id.
    pub instance_errors: Vec<String>,
    /// Rated ids with no stored instance.
    pub unmatched_ratings: Vec<String>,
}

fn domain_row(domain: &str, insts: &[&StoredInstance], ratings: &HashMap<&str, &HintRating>) -> DomainRow {
    let m = repair_metrics(insts);
    let rated: Vec<&HintRating> = insts
        .iter()
        .filter_map(|i| ratings.get(i.instance_id.as_str()).copied())
        .collect();
    let bundles: Vec<&FeedbackBundle> = insts.iter().filter_map(|i| i.bundle.as_ref()).collect();
    let mean_of = |f: &dyn Fn(&FeedbackBundle) -> f64| {
        let v: Vec<f64> = bundles.iter().map(|b| f(b)).collect();
        mean_stderr(&v).0
    };
    DomainRow {
        domain: domain.to_string(),
        instances: insts.len(),
        errors: insts.iter().filter(|i| i.error.is_some()).count(),
        rated: rated.len(),
        hgood_pct: aggregate_hgood(&rated).ok().map(|s| s.hgood_pct),
        rpass_pct: m.rpass_pct,
        rpass_stderr: m.rpass_stderr,
        redit_mean: m.redit_mean,
        redit_stderr: m.redit_stderr,
        usd_cost_mean: mean_of(&|b| b.telemetry.usd_cost),
        latency_s_mean: mean_of(&|b| b.telemetry.total_latency_ms as f64 / 1000.0),
    }
}

/// Builds the report from stored instances and, optionally, one rating per
/// instance.
pub fn build_report(instances: &[StoredInstance], ratings: &[&HintRating], machine: &str) -> EvalReport {
    let by_id: HashMap<&str, &HintRating> = ratings.iter().map(|r| (r.instance_id.as_str(), *r)).collect();
    let known: BTreeSet<&str> = instances.iter().map(|i| i.instance_id.as_str()).collect();
    let mut domains: BTreeMap<&str, Vec<&StoredInstance>> = BTreeMap::new();
    for inst in instances {
        domains.entry(&inst.domain).or_default().push(inst);
    }
    let all: Vec<&StoredInstance> = instances.iter().collect();
    let bundles = || instances.iter().filter_map(|i| i.bundle.as_ref());
    let backends: BTreeSet<String> = bundles().map(|b| b.telemetry.backend_id.clone()).collect();
    let n_rs: BTreeSet<u32> = bundles().map(|b| b.config_used.n_r).collect();
    let seeds: BTreeSet<u64> = instances.iter().filter_map(|i| i.seed).collect();
    let runs: BTreeSet<u32> = instances.iter().map(|i| i.run).collect();

    let mut unmatched: Vec<String> = by_id
        .keys()
        .filter(|id| !known.contains(*id))
        .map(|s| s.to_string())
        .collect();
    unmatched.sort();
    EvalReport {
        provenance: Provenance {
            backends: backends.into_iter().collect(),
            backend_class: bundles().next().map(|b| b.telemetry.backend_class),
            n_r: (n_rs.len() == 1).then(|| *n_rs.iter().next().unwrap_or(&0)),
            runs: runs.len(),
            seeds: seeds.into_iter().collect(),
            machine: machine.to_string(),
        },
        domains: domains.iter().map(|(d, insts)| domain_row(d, insts, &by_id)).collect(),
        all: domain_row(ALL_DOMAINS, &all, &by_id),
        instance_errors: instances
            .iter()
            .filter(|i| i.error.is_some())
            .map(|i| i.instance_id.clone())
            .collect(),
        unmatched_ratings: unmatched,
    }
}

/// A label for the host, in the spirit of a hardware column.
pub fn machine_label() -> String {
    format!("{}-{} ({} threads)", std::env::consts::OS, std::env::consts::ARCH, num_threads())
}

fn num_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn with_stderr(mean: f64, stderr: f64) -> String {
    format!("{mean:.1} ({stderr:.1})")
}

/// Aligned plain-text table; missing values render as `n/a`.
pub fn render_text(report: &EvalReport) -> String {
    let header = ["Domain", "HGood%", "RPass%", "REdit", "Inference (s)", "Cost (USD)", "Errors"];
    let mut rows: Vec<[String; 7]> = vec![header.map(String::from)];
    for row in report.domains.iter().chain(std::iter::once(&report.all)) {
        rows.push([
            row.domain.clone(),
            row.hgood_pct.map_or("n/a".into(), |v| format!("{v:.1}")),
            with_stderr(row.rpass_pct, row.rpass_stderr),
            match (row.redit_mean, row.redit_stderr) {
                (Some(m), Some(s)) => with_stderr(m, s),
                _ => "n/a".into(),
            },
            format!("{:.2}", row.latency_s_mean),
            format!("{:.4}", row.usd_cost_mean),
            row.errors.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let p = &report.provenance;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "backend: {}  n_r: {}  runs: {}  machine: {}",
        if p.backends.is_empty() { "n/a".into() } else { p.backends.join(",") },
        p.n_r.map_or("n/a".into(), |n| n.to_string()),
        p.runs,
        p.machine
    );
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    if !report.instance_errors.is_empty() {
        let _ = writeln!(out, "instance errors: {}", report.instance_errors.join(", "));
    }
    if !report.unmatched_ratings.is_empty() {
        let _ = writeln!(out, "ratings without instances: {}", report.unmatched_ratings.join(", "));
    }
    out
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("report.json");
    let text = to_canonical_json(report).map_err(json_err(&json))?;
    std::fs::write(&json, text).map_err(io_err(&json))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, render_text(report)).map_err(io_err(&txt))
}
