//! Subcommand implementations. Each returns `Ok(true)` on success and
//! `Ok(false)` when it ran but found problems worth a non-zero exit.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hintkit_core::corpus::{load_corpus, validate_corpus, BuggyProgram, Corpus, Split};
use hintkit_core::evalbench::{
    build_report, compute_min_edit, hgood_agreement, load_instances, load_ratings, machine_label, primary_ratings,
    redit_mismatches, render_text, run_benchmark, write_report, BenchmarkSpec,
};
use hintkit_core::gateway::{BackendClass, HttpBackendConfig, PricingTable};
use hintkit_core::pipeline::PipelineConfig;
use hintkit_core::prompts::PromptBundle;
use hintkit_core::pytokens::{source_edit_distance, tokenize};
use hintkit_core::sandbox::{Limits, Sandbox};
use hintkit_core::synthgen::{
    default_catalog, export_dataset, load_catalog, ExportOptions, FeedbackTuple, SynthConfig, Synthesizer,
};
use hintkit_core::util::to_canonical_json;

use crate::config::BackendSpec;

/// Where stored bundles live under a bench output directory.
pub const INSTANCES_DIR: &str = "instances";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, clap::Args)]
pub struct BackendArgs {
    /// Scripted responses for the mock backend.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API, including the version segment.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable that holds the API key.
    #[arg(long, value_name = "VAR")]
    pub api_key_env: Option<String>,
    /// Identifier used in telemetry and pricing.
    #[arg(long, default_value = "openai")]
    pub backend_id: String,
    /// Mark a self-hosted endpoint as local.
    #[arg(long)]
    pub local: bool,
}

impl BackendArgs {
    pub fn spec(&self, kind: BackendKind) -> Result<BackendSpec> {
        match kind {
            BackendKind::Mock => {
                let script = self.mock_script.clone().context("--mock-script is required for the mock backend")?;
                Ok(BackendSpec::Mock { script })
            }
            BackendKind::Openai => {
                let (Some(url), Some(model)) = (&self.base_url, &self.model) else {
                    bail!("--base-url and --model are required for the openai backend");
                };
                let mut cfg = HttpBackendConfig::new(&self.backend_id, url, model);
                cfg.api_key_env = self.api_key_env.clone();
                if self.local {
                    cfg.class = BackendClass::Local;
                }
                Ok(BackendSpec::Openai(cfg))
            }
        }
    }
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn validate(corpus: &Path, json: bool) -> Result<bool> {
    let corpus = load(corpus)?;
    let sandbox = Sandbox::discover()?;
    let report = validate_corpus(&corpus, &sandbox, Limits::default())?;
    if json {
        print!("{}", to_canonical_json(&report)?);
    }
    let problems = report.problems();
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() && !json {
        println!(
            "{}: {} tasks, {} bugs, all checks passed",
            corpus.name,
            corpus.tasks.len(),
            corpus.bugs.len()
        );
    }
    Ok(problems.is_empty())
}

pub struct BenchOptions {
    pub corpora: Vec<PathBuf>,
    pub backend: BackendSpec,
    pub pipeline: PipelineConfig,
    pub pricing: Option<PathBuf>,
    pub runs: u32,
    pub workers: usize,
    pub out: PathBuf,
    pub machine: Option<String>,
}

pub fn bench(opts: &BenchOptions) -> Result<bool> {
    let corpora = opts.corpora.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let backend = opts.backend.build()?;
    let sandbox = Sandbox::discover()?;
    let prompts = PromptBundle::resolve(&opts.pipeline.prompt_set)?;
    let pricing = match &opts.pricing {
        Some(p) => PricingTable::load(p)?,
        None => PricingTable::default(),
    };
    opts.pipeline.validate()?;
    let spec = BenchmarkSpec {
        corpora: &corpora,
        config: &opts.pipeline,
        backend: backend.as_ref(),
        executor: &sandbox,
        prompts: &prompts,
        pricing: &pricing,
        limits: Limits::default(),
        runs: opts.runs,
        workers: opts.workers,
    };
    let instances = run_benchmark(&spec, &opts.out.join(INSTANCES_DIR))?;
    let machine = opts.machine.clone().unwrap_or_else(machine_label);
    let report = build_report(&instances, &[], &machine);
    write_report(&report, &opts.out)?;
    print!("{}", render_text(&report));
    Ok(true)
}

pub struct SynthOptions {
    pub corpus: PathBuf,
    pub teacher: Option<BackendSpec>,
    /// Re-export previously synthesized tuples instead of calling a teacher.
    pub from_tuples: Option<PathBuf>,
    pub mistakes: Option<PathBuf>,
    pub config: SynthConfig,
    pub prompt_set: String,
    pub percent: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(opts: &SynthOptions) -> Result<bool> {
    let corpus = load(&opts.corpus)?;
    let sandbox = Sandbox::discover()?;
    let prompts = PromptBundle::resolve(&opts.prompt_set)?;
    std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;

    let tuples: Vec<FeedbackTuple> = match (&opts.from_tuples, &opts.teacher) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(teacher)) => {
            let backend = teacher.build()?;
            let catalog = match &opts.mistakes {
                Some(p) => load_catalog(p)?,
                None => default_catalog(),
            };
            let synth = Synthesizer {
                teacher: backend.as_ref(),
                executor: &sandbox,
                prompts: &prompts,
                limits: Limits::default(),
                config: opts.config.clone(),
            };
            let outcome = synth.synthesize(&corpus, &catalog)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let synthetic: Vec<&BuggyProgram> = outcome.bugs.iter().filter(|b| corpus.bug(&b.id).is_none()).collect();
            write_json(&opts.out.join("bugs.json"), &synthetic)?;
            write_json(&opts.out.join("tuples.json"), &outcome.tuples)?;
            outcome.tuples
        }
        (None, None) => bail!("either a teacher backend or --from-tuples is required"),
    };

    let options = ExportOptions {
        percent: opts.percent,
        seed: opts.seed,
    };
    let manifest = export_dataset(&tuples, &corpus, &prompts, &sandbox, Limits::default(), &opts.out, &options)?;
    println!(
        "{} tuples from {} bugs -> {} instances ({})",
        manifest.tuples,
        manifest.bugs,
        manifest.instances,
        manifest
            .per_type
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(true)
}

pub struct ReportOptions {
    pub dir: PathBuf,
    pub ratings: Option<PathBuf>,
    pub primary_rater: Option<String>,
    pub kappa: Option<(String, String)>,
    pub machine: Option<String>,
}

pub fn report(opts: &ReportOptions) -> Result<bool> {
    let instances = load_instances(&opts.dir.join(INSTANCES_DIR))?;
    if instances.is_empty() {
        bail!("no stored instances under {}", opts.dir.join(INSTANCES_DIR).display());
    }
    let ratings = match &opts.ratings {
        Some(p) => load_ratings(p)?,
        None => Vec::new(),
    };
    let primary = if ratings.is_empty() {
        Vec::new()
    } else {
        primary_ratings(&ratings, opts.primary_rater.as_deref())?
    };
    let machine = opts.machine.clone().unwrap_or_else(machine_label);
    let report = build_report(&instances, &primary, &machine);
    write_report(&report, &opts.dir)?;
    print!("{}", render_text(&report));

    if let Some((r1, r2)) = &opts.kappa {
        let a = hgood_agreement(&ratings, r1, r2)?;
        match a.kappa {
            Some(k) => println!("kappa({r1}, {r2}) = {k:.3} over {} instances", a.a + a.b + a.c + a.d),
            None => println!("kappa({r1}, {r2}) undefined: both raters constant"),
        }
    }
    let mismatches = redit_mismatches(&instances);
    for (id, stored, fresh) in &mismatches {
        eprintln!("{id}: stored REdit {stored} but sources give {fresh}");
    }
    Ok(mismatches.is_empty())
}

pub fn tokens(file: &Path, against: Option<&Path>) -> Result<bool> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let src = read(file)?;
    let stream = tokenize(&src);
    print!("{}", stream.render());
    if let Some(other) = against {
        println!("distance: {}", source_edit_distance(&src, &read(other)?));
    }
    if stream.had_errors {
        eprintln!("note: {} contains lexical errors; recovered tokens shown", file.display());
    }
    Ok(true)
}

pub fn min_edit(eval: &Path, training: &Path) -> Result<bool> {
    let eval: Vec<BuggyProgram> = load(eval)?.bugs_in(Split::Evaluation).cloned().collect();
    let training: Vec<BuggyProgram> = load(training)?.bugs_in(Split::Training).cloned().collect();
    let r = compute_min_edit(&eval, &training)?;
    for (id, d) in &r.per_bug {
        println!("{id}\t{d}");
    }
    println!("mean {:.2} (stderr {:.2})", r.mean, r.stderr);
    Ok(true)
}
