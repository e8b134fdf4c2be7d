use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hintkit_cli::commands::{self, BackendArgs, BackendKind, BenchOptions, ReportOptions, SynthOptions};
use hintkit_cli::config::ServiceConfig;
use hintkit_core::pipeline::PipelineConfig;
use hintkit_core::synthgen::SynthConfig;

#[derive(Parser)]
#[command(name = "hintkit", version, about = "Validated repairs and concealed hints for learner programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every reference solution and bug of a corpus through the sandbox.
    Validate {
        corpus: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate feedback for every evaluation bug and write metrics.
    Bench {
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long, value_enum)]
        backend: BackendKind,
        #[command(flatten)]
        backend_args: BackendArgs,
        /// Repair samples per instance.
        #[arg(long)]
        n_r: Option<u32>,
        #[arg(long, default_value_t = 3)]
        runs: u32,
        /// Base seed; run r uses seed + r.
        #[arg(long)]
        seed: Option<u64>,
        /// Built-in prompt set id or path to a prompt bundle.
        #[arg(long)]
        prompts: Option<String>,
        /// Pricing table JSON (USD per 1M tokens).
        #[arg(long)]
        pricing: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Host label recorded in the report.
        #[arg(long)]
        machine: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a chat-format training set with a teacher backend.
    Synth {
        corpus: PathBuf,
        #[arg(long, value_enum, required_unless_present = "from_tuples")]
        teacher: Option<BackendKind>,
        #[command(flatten)]
        backend_args: BackendArgs,
        /// Re-export tuples from an earlier run instead of calling a teacher.
        #[arg(long, conflicts_with = "teacher")]
        from_tuples: Option<PathBuf>,
        /// Mistake catalog JSON; defaults to the built-in catalog.
        #[arg(long)]
        mistakes: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_tuples: u32,
        /// Keep this percentage of valid tuples, drawn with --seed.
        #[arg(long)]
        percent: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = hintkit_core::prompts::DEFAULT_PROMPT_SET)]
        prompts: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the report for a bench output directory.
    Report {
        dir: PathBuf,
        /// Ratings CSV: instance_id,rater_id,hcorrect,hinformative,hconceal,hcomprehensible
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        primary_rater: Option<String>,
        /// Print Cohen's kappa on HGood between two raters.
        #[arg(long, num_args = 2, value_names = ["RATER1", "RATER2"], requires = "ratings")]
        kappa: Option<Vec<String>>,
        #[arg(long)]
        machine: Option<String>,
    },
    /// Print the token stream of a program.
    Tokens {
        file: PathBuf,
        /// Also print the token edit distance to this program.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Distance from each evaluation bug to its closest training bug.
    MinEdit { eval: PathBuf, training: PathBuf },
    /// Serve the learner HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(if json { "info" } else { "warn" }));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().flatten_event(true).init();
    } else {
        builder.compact().init();
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate { corpus, json } => commands::validate(&corpus, json),
        Command::Bench {
            corpora,
            backend,
            backend_args,
            n_r,
            runs,
            seed,
            prompts,
            pricing,
            workers,
            machine,
            out,
        } => {
            let mut pipeline = PipelineConfig {
                seed,
                ..PipelineConfig::default()
            };
            if let Some(n) = n_r {
                pipeline.n_r = n;
            }
            if let Some(p) = prompts {
                pipeline.prompt_set = p;
            }
            commands::bench(&BenchOptions {
                corpora,
                backend: backend_args.spec(backend)?,
                pipeline,
                pricing,
                runs,
                workers,
                out,
                machine,
            })
        }
        Command::Synth {
            corpus,
            teacher,
            backend_args,
            from_tuples,
            mistakes,
            max_tuples,
            percent,
            seed,
            prompts,
            out,
        } => commands::synth(&SynthOptions {
            corpus,
            teacher: teacher.map(|k| backend_args.spec(k)).transpose()?,
            from_tuples,
            mistakes,
            config: SynthConfig {
                max_tuples,
                ..SynthConfig::default()
            },
            prompt_set: prompts,
            percent,
            seed,
            out,
        }),
        Command::Report {
            dir,
            ratings,
            primary_rater,
            kappa,
            machine,
        } => commands::report(&ReportOptions {
            dir,
            ratings,
            primary_rater,
            kappa: kappa.map(|v| (v[0].clone(), v[1].clone())),
            machine,
        }),
        Command::Tokens { file, against } => commands::tokens(&file, against.as_deref()),
        Command::MinEdit { eval, training } => commands::min_edit(&eval, &training),
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(&config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(hintkit_cli::service::serve(cfg))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(matches!(cli.command, Command::Serve { .. }));
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
