use std::fs;
use std::path::{Path, PathBuf};

use hintkit_core::corpus::{
    load_corpus, save_corpus, select_failing_tests, validate_corpus, CorpusError, SelectError,
    Split,
};
use hintkit_core::sandbox::{CaseStatus, Executor, Limits, Sandbox};

fn corpora() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpora")
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            fs::copy(entry.path(), dest).unwrap();
        }
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn intro_basics_has_five_tasks() {
    let c = load_corpus(&corpora().join("intro-basics")).unwrap();
    assert_eq!(c.name, "intro-basics");
    let titles: Vec<_> = c.tasks.iter().map(|t| t.title.as_str()).collect();
    assert_eq!(
        titles,
        vec!["DuplicateElimination", "SortingTuples", "Top-k elements", "SequentialSearch", "UniqueDatesMonths"]
    );
    let dup = c.task("duplicate_elimination").unwrap();
    assert_eq!(dup.entry_function, "remove_extras");
    assert!(c.bugs_in(Split::Evaluation).count() >= 5);
    assert!(c.bugs_in(Split::Training).count() >= 1);
}

#[test]
fn karel_prelude_is_loaded_from_file() {
    let c = load_corpus(&corpora().join("karel-algo")).unwrap();
    for t in &c.tasks {
        let prelude = t.prelude.as_deref().expect("karel tasks carry the LinkList prelude");
        for op in ["go_next", "go_prev", "get_value", "set_value", "has_next", "has_prev"] {
            assert!(prelude.contains(&format!("def {op}(")), "{op}");
        }
    }
}

#[test]
fn empty_directory_is_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_corpus(dir.path()).unwrap_err();
    assert!(matches!(err, CorpusError::MissingManifest(_)));
    assert!(err.to_string().contains("missing manifest"));
}

#[test]
fn dangling_task_reference_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&corpora().join("basic-algo"), dir.path());
    let sidecar = dir.path().join("bugs/gcd_1.json");
    let text = fs::read_to_string(&sidecar).unwrap().replace("\"gcd\"", "\"lcm\"");
    fs::write(&sidecar, text).unwrap();
    match load_corpus(dir.path()).unwrap_err() {
        CorpusError::DanglingTask { bug_id, task_id, .. } => {
            assert_eq!(bug_id, "gcd_1");
            assert_eq!(task_id, "lcm");
        }
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn schema_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&corpora().join("basic-algo"), dir.path());
    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(CorpusError::SchemaVersion { found: 7, .. })));
}

#[test]
fn malformed_task_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&corpora().join("basic-algo"), dir.path());
    fs::write(dir.path().join("tasks/gcd.json"), "{ not json").unwrap();
    let err = load_corpus(dir.path()).unwrap_err().to_string();
    assert!(err.contains("gcd.json"), "{err}");
}

#[test]
fn bundled_corpora_round_trip_byte_identical() {
    for name in ["basic-algo", "intro-basics", "karel-algo"] {
        let src = corpora().join(name);
        let corpus = load_corpus(&src).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_corpus(&corpus, out.path()).unwrap();
        assert_eq!(files_under(&src), files_under(out.path()), "{name}: file set");
        for rel in files_under(&src) {
            assert_eq!(
                fs::read(src.join(&rel)).unwrap(),
                fs::read(out.path().join(&rel)).unwrap(),
                "{name}: {} differs",
                rel.display()
            );
        }
        assert_eq!(load_corpus(out.path()).unwrap(), corpus);
    }
}

#[test]
fn bundled_corpora_validate() {
    let sandbox = Sandbox::discover().unwrap();
    for name in ["basic-algo", "intro-basics", "karel-algo"] {
        let corpus = load_corpus(&corpora().join(name)).unwrap();
        let report = validate_corpus(&corpus, &sandbox, Limits::default()).unwrap();
        assert!(report.is_ok(), "{name}: {:?}", report.problems());
        assert!(report.tasks.iter().all(|t| t.reference_passed == Some(true)));
        assert!(report.bugs.iter().all(|b| !b.failing_ids.is_empty()));
    }
}

#[test]
fn karel_inverted_palindrome_fails_first_case() {
    let corpus = load_corpus(&corpora().join("karel-algo")).unwrap();
    let bug = corpus.bug("karel_palindrome_1").unwrap();
    let task = corpus.task(&bug.task_id).unwrap();
    let set = select_failing_tests(bug, task, &Sandbox::discover().unwrap(), 3, Limits::default()).unwrap();
    let first = &set.cases[0];
    assert_eq!(first.case.args[0], serde_json::json!([4, 5, 7, 5, 4]));
    assert_eq!(first.result.status, CaseStatus::Fail);
    assert_eq!(first.result.actual, Some(serde_json::json!(false)));
    assert_eq!(set.cases.len(), 3);
}

#[test]
fn naive_fibonacci_times_out_on_large_input() {
    let corpus = load_corpus(&corpora().join("basic-algo")).unwrap();
    let bug = corpus.bug("fibonacci_2").unwrap();
    let task = corpus.task("fibonacci").unwrap();
    let v = Sandbox::discover()
        .unwrap()
        .run_suite(&task.execution_request(&bug.source, Limits::default()))
        .unwrap();
    assert_eq!(v.failing_ids, vec!["t6"]);
    assert_eq!(v.results[5].status, CaseStatus::Timeout);
}

#[test]
fn reference_solution_as_bug_is_flagged_not_buggy() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&corpora().join("intro-basics"), dir.path());
    let corpus = load_corpus(dir.path()).unwrap();
    let reference = corpus.task("top_k").unwrap().reference_solution.clone().unwrap();
    fs::write(dir.path().join("bugs/top_k_1.py"), &reference).unwrap();
    let corpus = load_corpus(dir.path()).unwrap();
    let sandbox = Sandbox::discover().unwrap();
    let report = validate_corpus(&corpus, &sandbox, Limits::default()).unwrap();
    assert!(!report.is_ok());
    let problems = report.problems();
    assert_eq!(problems.len(), 1);
    assert!(problems[0].contains("top_k_1") && problems[0].contains("not buggy"));

    let bug = corpus.bug("top_k_1").unwrap();
    let err = select_failing_tests(bug, corpus.task("top_k").unwrap(), &sandbox, 3, Limits::default())
        .unwrap_err();
    assert!(matches!(err, SelectError::NotBuggy(_)));
}

#[test]
fn failing_set_is_prefix_of_suite_order() {
    let corpus = load_corpus(&corpora().join("intro-basics")).unwrap();
    let sandbox = Sandbox::discover().unwrap();
    for bug in corpus.bugs_in(Split::Evaluation) {
        let task = corpus.task(&bug.task_id).unwrap();
        let full = sandbox.run_suite(&task.execution_request(&bug.source, Limits::default())).unwrap();
        for k in 1..=3 {
            let set = select_failing_tests(bug, task, &sandbox, k, Limits::default()).unwrap();
            let expected: Vec<&str> = full.failing_ids.iter().take(k).map(String::as_str).collect();
            assert_eq!(set.ids(), expected, "{} k={k}", bug.id);
        }
    }
}
