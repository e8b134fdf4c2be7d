use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use hintkit_core::corpus::{load_corpus, BuggyProgram, Corpus, Origin, Split};
use hintkit_core::evalbench::{
    aggregate_hgood, build_report, cohens_kappa, compute_min_edit, hgood_agreement, load_instances, parse_ratings,
    primary_ratings, redit_mismatches, render_text, repair_metrics, run_benchmark, write_report, BenchmarkSpec,
    EvalError, EvalReport, HintRating, StoredInstance,
};
use hintkit_core::gateway::{MockBackend, PricingTable};
use hintkit_core::pipeline::PipelineConfig;
use hintkit_core::prompts::PromptBundle;
use hintkit_core::pytokens::tokenize;
use hintkit_core::sandbox::{Limits, Sandbox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).to_path_buf()
}

fn intro() -> Corpus {
    load_corpus(&root().join("../../corpora/intro-basics")).unwrap()
}

/// Memoized recursion over (kind, text) keys, independent of the DP.
fn oracle_distance(a: &str, b: &str) -> usize {
    fn go(a: &[(String, String)], b: &[(String, String)], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if let Some(&d) = memo.get(&(a.len(), b.len())) {
            return d;
        }
        let d = match (a.first(), b.first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some(x), Some(y)) => (go(&a[1..], &b[1..], memo) + usize::from(x != y))
                .min(go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1),
        };
        memo.insert((a.len(), b.len()), d);
        d
    }
    let keys = |s: &str| -> Vec<(String, String)> {
        tokenize(s).tokens.into_iter().map(|t| (t.kind.to_string(), t.text)).collect()
    };
    go(&keys(a), &keys(b), &mut HashMap::new())
}

/// One benchmark over intro-basics with the bench mock, two runs, shared by
/// the tests below.
fn bench() -> &'static (tempfile::TempDir, Vec<StoredInstance>) {
    static BENCH: OnceLock<(tempfile::TempDir, Vec<StoredInstance>)> = OnceLock::new();
    BENCH.get_or_init(|| {
        let mock = MockBackend::load(&root().join("../../corpora/mock/bench-intro.json")).unwrap();
        let sandbox = Sandbox::discover().unwrap();
        let prompts = PromptBundle::default();
        let pricing = PricingTable::default();
        let corpora = [intro()];
        let cfg = PipelineConfig {
            n_r: 2,
            ..Default::default()
        };
        let spec = BenchmarkSpec {
            corpora: &corpora,
            config: &cfg,
            backend: &mock,
            executor: &sandbox,
            prompts: &prompts,
            pricing: &pricing,
            limits: Limits::default(),
            runs: 2,
            workers: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let instances = run_benchmark(&spec, dir.path()).unwrap();
        (dir, instances)
    })
}

#[test]
fn benchmark_persists_one_file_per_instance() {
    let (dir, instances) = bench();
    assert_eq!(instances.len(), 20);
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 20);
    assert_eq!(&load_instances(dir.path()).unwrap(), instances);
    assert!(instances.iter().all(|i| i.error.is_none() && i.domain == "intro-basics"));
    let seeds: Vec<u64> = instances.iter().filter(|i| i.bug_id == "top_k_1").filter_map(|i| i.seed).collect();
    assert_eq!(seeds, [1, 2]);
}

#[test]
fn benchmark_rpass_is_deterministic_across_runs() {
    let (_, instances) = bench();
    let all: Vec<&StoredInstance> = instances.iter().collect();
    let m = repair_metrics(&all);
    assert_eq!(m.runs, 2);
    assert_eq!(m.rpass_pct, 60.0);
    assert_eq!(m.rpass_stderr, 0.0);
    assert_eq!(m.redit_stderr, Some(0.0));
    for r in &m.per_run {
        assert_eq!((r.instances, r.repaired, r.errors), (10, 6, 0));
    }
    // RPass of an instance is exactly the pipeline's non-empty repair flag
    for inst in instances {
        let b = inst.bundle.as_ref().unwrap();
        assert_eq!(inst.repair_found(), !b.repair.empty);
        assert_eq!(b.repair.selected.is_some(), !b.repair.empty);
    }
}

#[test]
fn redit_recomputes_from_stored_sources() {
    let (dir, _) = bench();
    let stored = load_instances(dir.path()).unwrap();
    assert!(redit_mismatches(&stored).is_empty());
    let mut distances = Vec::new();
    for inst in &stored {
        if let Some(sel) = inst.bundle.as_ref().and_then(|b| b.repair.selected.as_ref()) {
            let d = oracle_distance(&inst.bundle.as_ref().unwrap().buggy_source, &sel.source);
            assert_eq!(d, sel.edit_distance, "{}", inst.instance_id);
            distances.push(d as f64);
        }
    }
    // both runs select the same repairs, so the per-run means coincide
    let expected = distances.iter().sum::<f64>() / distances.len() as f64;
    let all: Vec<&StoredInstance> = stored.iter().collect();
    assert_eq!(repair_metrics(&all).redit_mean, Some(expected));

    let mut tampered = stored.clone();
    let sel = tampered[0].bundle.as_mut().unwrap().repair.selected.as_mut();
    if let Some(sel) = sel {
        sel.edit_distance += 1;
        assert_eq!(redit_mismatches(&tampered).len(), 1);
    }
}

/// Five instances per run, built from stored bundles, with `found[run]`
/// repairs in each run.
fn constructed(found: &[usize]) -> Vec<StoredInstance> {
    let (_, instances) = bench();
    let hit = instances.iter().find(|i| i.repair_found()).unwrap();
    let miss = instances.iter().find(|i| !i.repair_found()).unwrap();
    let mut out = Vec::new();
    for (r, &k) in found.iter().enumerate() {
        for i in 0..5 {
            let src = if i < k { hit } else { miss };
            out.push(StoredInstance {
                instance_id: format!("bug{i}.run{}", r + 1),
                bug_id: format!("bug{i}"),
                run: r as u32 + 1,
                ..src.clone()
            });
        }
    }
    out
}

#[test]
fn rpass_arithmetic() {
    let one = constructed(&[3]);
    let m = repair_metrics(&one.iter().collect::<Vec<_>>());
    assert_eq!((m.rpass_pct, m.rpass_stderr), (60.0, 0.0));

    let two = constructed(&[3, 4]);
    let m = repair_metrics(&two.iter().collect::<Vec<_>>());
    assert_eq!(m.per_run.iter().map(|r| r.rpass_pct).collect::<Vec<_>>(), [60.0, 80.0]);
    assert!((m.rpass_pct - 70.0).abs() < 1e-9);
    assert!((m.rpass_stderr - 10.0).abs() < 1e-9);

    // an errored instance stays in the denominator
    let mut errs = constructed(&[3]);
    errs[0].bundle = None;
    errs[0].error = Some("hint stage: backend unavailable".into());
    let m = repair_metrics(&errs.iter().collect::<Vec<_>>());
    assert_eq!((m.per_run[0].instances, m.per_run[0].repaired, m.per_run[0].errors), (5, 2, 1));
    assert_eq!(m.rpass_pct, 40.0);
}

fn rating(id: &str, rater: &str, attrs: [u8; 4]) -> HintRating {
    HintRating {
        instance_id: id.into(),
        rater_id: rater.into(),
        hcorrect: attrs[0],
        hinformative: attrs[1],
        hconceal: attrs[2],
        hcomprehensible: attrs[3],
    }
}

#[test]
fn hgood_requires_all_four_attributes() {
    let mut rs: Vec<HintRating> = (0..4).map(|i| rating(&format!("i{i}"), "r1", [1; 4])).collect();
    let all: Vec<&HintRating> = rs.iter().collect();
    assert_eq!(aggregate_hgood(&all).unwrap().hgood_pct, 100.0);
    rs[2].hconceal = 0;
    let s = aggregate_hgood(&rs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(s.hgood_pct, 75.0);
    assert_eq!(s.hconceal_pct, 75.0);
    assert_eq!(s.hcorrect_pct, 100.0);
    let err = aggregate_hgood(&[]).unwrap_err();
    assert!(matches!(err, EvalError::NoRatings));
    assert_eq!(err.to_string(), "no ratings");
}

fn table(a: usize, b: usize, c: usize, d: usize) -> Vec<(bool, bool)> {
    let mut v = vec![(true, true); a];
    v.extend(vec![(true, false); b]);
    v.extend(vec![(false, true); c]);
    v.extend(vec![(false, false); d]);
    v
}

/// Chance agreement counted over all n² cross pairs of the two raters'
/// labels, observed agreement over the n aligned pairs.
fn kappa_by_pair_counts(pairs: &[(bool, bool)]) -> Option<f64> {
    let n = pairs.len();
    let observed = pairs.iter().filter(|(x, y)| x == y).count();
    let mut chance = 0usize;
    for (x, _) in pairs {
        for (_, y) in pairs {
            chance += usize::from(x == y);
        }
    }
    let (p_o, p_e) = (observed as f64 / n as f64, chance as f64 / (n * n) as f64);
    (chance != n * n).then(|| (p_o - p_e) / (1.0 - p_e))
}

#[test]
fn kappa_worked_table() {
    let pairs = table(20, 5, 10, 15);
    let r = cohens_kappa(&pairs).unwrap();
    assert_eq!((r.a, r.b, r.c, r.d), (20, 5, 10, 15));
    assert_eq!(r.p_o, 0.7);
    assert_eq!(r.p_e, 0.5);
    assert_eq!(r.kappa, Some(0.4));
    assert!(!r.degenerate);
    assert!((kappa_by_pair_counts(&pairs).unwrap() - 0.4).abs() < 1e-12);

    let perfect = cohens_kappa(&table(7, 0, 0, 3)).unwrap();
    assert_eq!(perfect.kappa, Some(1.0));
}

#[test]
fn kappa_near_zero_for_independent_raters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs: Vec<(bool, bool)> = (0..10_000).map(|_| (rng.random::<bool>(), rng.random::<bool>())).collect();
    let k = cohens_kappa(&pairs).unwrap().kappa.unwrap();
    assert!(k.abs() < 0.05, "kappa {k}");
}

#[test]
fn kappa_from_two_raters_hgood() {
    let rs = vec![
        rating("a", "r1", [1; 4]),
        rating("a", "r2", [1; 4]),
        rating("b", "r1", [1, 1, 0, 1]),
        rating("b", "r2", [0; 4]),
        rating("c", "r1", [1; 4]),
        rating("c", "r2", [0, 1, 1, 1]),
        rating("d", "r1", [1; 4]),
    ];
    let r = hgood_agreement(&rs, "r1", "r2").unwrap();
    assert_eq!((r.a, r.b, r.c, r.d), (1, 1, 0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn kappa_is_bounded_and_matches_pair_counts(a in 0usize..30, b in 0usize..30, c in 0usize..30, d in 0usize..30) {
        prop_assume!(a + b + c + d > 0);
        let pairs = table(a, b, c, d);
        let r = cohens_kappa(&pairs).unwrap();
        let oracle = kappa_by_pair_counts(&pairs);
        prop_assert_eq!(r.kappa.is_none(), oracle.is_none());
        if let (Some(k), Some(o)) = (r.kappa, oracle) {
            prop_assert!((-1.0..=1.0).contains(&k));
            prop_assert!((k - o).abs() < 1e-9);
        }
    }
}

fn bug(id: &str, source: &str) -> BuggyProgram {
    BuggyProgram {
        id: id.into(),
        task_id: "t".into(),
        source: source.into(),
        origin: Origin::Designed,
        split: Split::Evaluation,
    }
}

#[test]
fn min_edit_against_training_set() {
    let corpus = intro();
    let eval: Vec<BuggyProgram> = corpus.bugs_in(Split::Evaluation).cloned().collect();
    let copy = compute_min_edit(&eval[..1], &[eval[0].clone()]).unwrap();
    assert_eq!(copy.per_bug, vec![(eval[0].id.clone(), 0)]);

    let one = compute_min_edit(&[bug("e", "x = a + b\n")], &[bug("t", "x = a - b\n")]).unwrap();
    assert_eq!((one.mean, one.stderr), (1.0, 0.0));

    // disjoint short programs: the minimum over the set, checked by recursion
    let eval = [bug("e", "return 7\n"), bug("f", "a.b(c)\n")];
    let training = [bug("t1", "while x:\n    y\n"), bug("t2", "print('z')\n")];
    let report = compute_min_edit(&eval, &training).unwrap();
    for (e, (_, d)) in eval.iter().zip(&report.per_bug) {
        let want = training.iter().map(|t| oracle_distance(&e.source, &t.source)).min().unwrap();
        assert_eq!(*d, want);
    }
    assert!(matches!(compute_min_edit(&eval, &[]), Err(EvalError::EmptySet("training"))));
}

fn golden(name: &str, text: &str) {
    let path = root().join("tests/fixtures/evalbench").join(name);
    if std::env::var_os("HINTKIT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap(), "{name}");
}

fn timing_free(instances: &[StoredInstance]) -> Vec<StoredInstance> {
    instances
        .iter()
        .map(|i| StoredInstance {
            bundle: i.bundle.as_ref().map(|b| b.without_timings()),
            ..i.clone()
        })
        .collect()
}

#[test]
fn report_golden_and_rerender() {
    let (dir, instances) = bench();
    let stable = timing_free(instances);
    let csv = "instance_id,rater_id,hcorrect,hinformative,hconceal,hcomprehensible\n\
               duplicate_elimination_1.run1,r1,1,1,1,1\n\
               duplicate_elimination_2.run1,r1,1,1,0,1\n\
               top_k_1.run1,r1,1,1,1,1\n\
               top_k_2.run1,r1,1,1,1,1\n\
               top_k_9.run1,r1,1,1,1,1\n";
    let ratings = parse_ratings(csv.as_bytes()).unwrap();
    let primary = primary_ratings(&ratings, None).unwrap();
    let report = build_report(&stable, &primary, "test-machine");
    assert_eq!(report.all.hgood_pct, Some(75.0));
    assert_eq!(report.all.rated, 4);
    assert_eq!(report.unmatched_ratings, ["top_k_9.run1"]);
    assert_eq!(report.all.usd_cost_mean, 0.0);
    assert_eq!(report.provenance.n_r, Some(2));
    golden("report.json", &hintkit_core::util::to_canonical_json(&report).unwrap());
    golden("report.txt", &render_text(&report));

    // re-rendering from disk is byte-identical
    let out = tempfile::tempdir().unwrap();
    write_report(&report, out.path()).unwrap();
    let again = build_report(&timing_free(&load_instances(dir.path()).unwrap()), &primary, "test-machine");
    let out2 = tempfile::tempdir().unwrap();
    write_report(&again, out2.path()).unwrap();
    for f in ["report.json", "report.txt"] {
        assert_eq!(std::fs::read(out.path().join(f)).unwrap(), std::fs::read(out2.path().join(f)).unwrap());
    }
    let parsed: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn report_without_ratings_shows_na() {
    let (_, instances) = bench();
    let report = build_report(&timing_free(instances), &[], "test-machine");
    assert_eq!(report.all.hgood_pct, None);
    let text = render_text(&report);
    let all_line = text.lines().find(|l| l.starts_with("all")).unwrap();
    assert!(all_line.contains("n/a"), "{text}");
    assert!(all_line.contains("60.0 (0.0)"));
    assert!(all_line.contains("0.0000"));
}
