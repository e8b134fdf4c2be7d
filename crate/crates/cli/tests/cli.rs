use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn corpora() -> PathBuf {
    workspace().join("corpora")
}

fn hintkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hintkit"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = hintkit(&["validate", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(hintkit(&[]).status.code(), Some(2));
}

#[test]
fn tokens_match_lexer_golden() {
    let dir = workspace().join("crates/core/tests/fixtures/lexer");
    let o = hintkit(&["tokens", p(&dir.join("03_gcd.py"))]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), std::fs::read_to_string(dir.join("03_gcd.tokens")).unwrap());

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.py"), tmp.path().join("b.py"));
    std::fs::write(&a, "x = a + b\n").unwrap();
    std::fs::write(&b, "x = a - b  # changed\n").unwrap();
    let o = hintkit(&["tokens", p(&a), "--against", p(&b)]);
    assert!(stdout(&o).ends_with("distance: 1\n"), "{}", stdout(&o));

    let o = hintkit(&["tokens", p(&tmp.path().join("missing.py"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: reading"));
}

#[test]
fn validate_reports_non_buggy_bug() {
    let o = hintkit(&["validate", p(&corpora().join("intro-basics"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("all checks passed"));

    let tmp = tempfile::tempdir().unwrap();
    let copy = tmp.path().join("intro");
    copy_dir(&corpora().join("intro-basics"), &copy);
    let task: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(copy.join("tasks/top_k.json")).unwrap()).unwrap();
    std::fs::write(copy.join("bugs/top_k_2.py"), task["reference_solution"].as_str().unwrap()).unwrap();
    let o = hintkit(&["validate", p(&copy)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bug top_k_2 (task top_k): not buggy"), "{}", stderr(&o));
}

#[test]
fn bench_then_report_with_mock_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let script = corpora().join("mock/bench-intro.json");
    let o = hintkit(&[
        "bench",
        p(&corpora().join("intro-basics")),
        "--backend",
        "mock",
        "--mock-script",
        p(&script),
        "--n-r",
        "3",
        "--runs",
        "1",
        "--machine",
        "ci",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("report.json").is_file());
    assert_eq!(std::fs::read_dir(out.join("instances")).unwrap().count(), 10);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["all"]["rpass_pct"], 60.0);
    assert_eq!(report["provenance"]["n_r"], 3);
    let first = std::fs::read(out.join("report.txt")).unwrap();

    let ratings = tmp.path().join("ratings.csv");
    std::fs::write(
        &ratings,
        "instance_id,rater_id,hcorrect,hinformative,hconceal,hcomprehensible\n\
         top_k_1.run1,ann,1,1,1,1\ntop_k_1.run1,bo,1,1,1,1\n\
         top_k_2.run1,ann,1,1,0,1\ntop_k_2.run1,bo,0,1,0,1\n\
         gcd_1.run1,ann,1,1,1,1\ngcd_1.run1,bo,1,1,1,1\n",
    )
    .unwrap();
    let o = hintkit(&["report", p(&out), "--machine", "ci"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("report.txt")).unwrap(), first);

    let o = hintkit(&["report", p(&out), "--ratings", p(&ratings), "--machine", "ci"]);
    assert_eq!(o.status.code(), Some(1), "two raters without a primary");
    assert!(stderr(&o).contains("choose a primary rater"));

    let o = hintkit(&[
        "report",
        p(&out),
        "--ratings",
        p(&ratings),
        "--primary-rater",
        "ann",
        "--kappa",
        "ann",
        "bo",
        "--machine",
        "ci",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("ratings without instances: gcd_1.run1"), "{text}");
    assert!(text.contains("kappa(ann, bo)"), "{text}");
}

#[test]
fn bench_with_missing_script_fails_operationally() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hintkit(&[
        "bench",
        p(&corpora().join("intro-basics")),
        "--backend",
        "mock",
        "--mock-script",
        p(&tmp.path().join("nope.json")),
        "--out",
        p(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loading mock script"));
    let o = hintkit(&["bench", p(&corpora().join("intro-basics")), "--backend", "mock", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--mock-script is required"));
}

#[test]
fn synth_percent_halves_tuple_count() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let mistakes = tmp.path().join("mistakes.json");
    std::fs::write(
        &mistakes,
        r#"[{"id": "loop_range", "description": "Loop bounds that skip the first or last element."}]"#,
    )
    .unwrap();
    let intro = corpora().join("intro-basics");
    let o = hintkit(&[
        "synth",
        p(&intro),
        "--teacher",
        "mock",
        "--mock-script",
        p(&corpora().join("mock/teacher.json")),
        "--mistakes",
        p(&mistakes),
        "--out",
        p(&full),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = |dir: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
    };
    let total = manifest(&full)["tuples"].as_u64().unwrap();
    assert_eq!(total, 16);
    assert_eq!(manifest(&full)["instances"], 64);

    let mut counts = Vec::new();
    for name in ["half_a", "half_b"] {
        let dir = tmp.path().join(name);
        let o = hintkit(&[
            "synth",
            p(&intro),
            "--from-tuples",
            p(&full.join("tuples.json")),
            "--percent",
            "50",
            "--seed",
            "3",
            "--out",
            p(&dir),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        counts.push(manifest(&dir)["tuples"].as_u64().unwrap());
    }
    assert_eq!(counts, [total.div_ceil(2); 2]);
    assert_eq!(
        std::fs::read(tmp.path().join("half_a/instances.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("half_b/instances.jsonl")).unwrap()
    );
}
