use std::time::Instant;

use hintkit_core::corpus::{CompareMode, TestCase};
use hintkit_core::sandbox::{
    CaseStatus, ExecutionRequest, Executor, Limits, Sandbox, SandboxConfig, SandboxError,
};
use serde_json::{json, Value};

fn case(id: &str, args: Vec<Value>, expected: Value) -> TestCase {
    TestCase {
        id: id.into(),
        args,
        expected,
        compare_mode: CompareMode::Exact,
        timeout_ms: 5000,
    }
}

fn request(program: &str, entry: &str, cases: Vec<TestCase>) -> ExecutionRequest {
    ExecutionRequest {
        prelude: None,
        program: program.into(),
        entry_function: entry.into(),
        cases,
        limits: Limits::default(),
    }
}

fn sandbox() -> Sandbox {
    Sandbox::discover().expect("python interpreter available")
}

#[test]
fn identity_program_passes() {
    let v = sandbox()
        .run_suite(&request("def f(x): return x", "f", vec![case("1", vec![json!(1)], json!(1))]))
        .unwrap();
    assert!(v.all_passed);
    assert_eq!(v.results[0].actual, Some(json!(1)));
}

#[test]
fn remove_extras_reference_passes() {
    let program = "def remove_extras(lst):\n    out = []\n    for x in lst:\n        if x not in out:\n            out.append(x)\n    return out\n";
    let v = sandbox()
        .run_suite(&request(
            program,
            "remove_extras",
            vec![case("1", vec![json!([5, 2, 1, 2, 3])], json!([5, 2, 1, 3]))],
        ))
        .unwrap();
    assert!(v.all_passed, "{v:?}");
}

#[test]
fn harness_comparisons() {
    let mut float_case = case("float", vec![json!(1), json!(3)], json!(0.3333333));
    float_case.compare_mode = CompareMode::FloatTol { eps: 1e-6 };
    let mut bool_ok = case("bool-ok", vec![json!(4), json!(2)], json!(true));
    bool_ok.compare_mode = CompareMode::Boolean;
    let mut bool_strict = case("bool-int", vec![json!(1), json!(1)], json!(true));
    bool_strict.compare_mode = CompareMode::Boolean;
    let program = "def f(a, b):\n    if a == 1 and b == 3:\n        return a / b\n    if a == 1:\n        return 1\n    return a > b\n";
    let v = sandbox()
        .run_suite(&request(program, "f", vec![float_case, bool_ok, bool_strict]))
        .unwrap();
    let statuses: Vec<_> = v.results.iter().map(|r| r.status).collect();
    assert_eq!(statuses, vec![CaseStatus::Pass, CaseStatus::Pass, CaseStatus::Fail]);
}

#[test]
fn tuples_compare_equal_to_lists() {
    let program = "def f(x):\n    return [(x, 'a'), (x + 1, 'b')]\n";
    let v = sandbox()
        .run_suite(&request(
            program,
            "f",
            vec![case("1", vec![json!(1)], json!([[1, "a"], [2, "b"]]))],
        ))
        .unwrap();
    assert!(v.all_passed);
}

#[test]
fn missing_entry_function_errors_every_case() {
    let v = sandbox()
        .run_suite(&request(
            "def f(x): return x + 1",
            "g",
            vec![case("1", vec![json!(1)], json!(2)), case("2", vec![json!(2)], json!(3))],
        ))
        .unwrap();
    assert_eq!(v.results.len(), 2);
    for r in &v.results {
        assert_eq!(r.status, CaseStatus::Error);
        assert!(r.stderr_excerpt.contains("g"), "{}", r.stderr_excerpt);
    }
}

#[test]
fn import_time_crash_errors_every_case() {
    let v = sandbox()
        .run_suite(&request(
            "raise ValueError('boom at import')\ndef f(x): return x",
            "f",
            vec![case("1", vec![json!(1)], json!(1)), case("2", vec![json!(2)], json!(2))],
        ))
        .unwrap();
    assert!(!v.all_passed);
    for r in &v.results {
        assert_eq!(r.status, CaseStatus::Error);
        assert!(r.stderr_excerpt.contains("boom at import"));
    }
}

#[test]
fn syntax_error_program_errors() {
    let v = sandbox()
        .run_suite(&request("def f(x)\n    return x", "f", vec![case("1", vec![json!(1)], json!(1))]))
        .unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Error);
    assert!(v.results[0].stderr_excerpt.contains("SyntaxError"));
}

#[test]
fn infinite_loop_times_out() {
    let mut c = case("1", vec![json!(1)], json!(1));
    c.timeout_ms = 500;
    let started = Instant::now();
    let v = sandbox()
        .run_suite(&request("def f(x):\n    while True:\n        pass\n", "f", vec![c]))
        .unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Timeout);
    assert!(v.results[0].duration_ms >= 500);
    assert!(started.elapsed().as_millis() < 1500 + 1000);
}

#[test]
fn timeout_in_native_code_is_killed_externally() {
    // time.sleep in a loop with the alarm disabled cannot be interrupted by the harness
    let program = "import signal, time\ndef f(x):\n    signal.setitimer(signal.ITIMER_REAL, 0)\n    signal.signal(signal.SIGALRM, signal.SIG_IGN)\n    while True:\n        time.sleep(0.05)\n";
    let mut c = case("1", vec![json!(1)], json!(1));
    c.timeout_ms = 300;
    let v = sandbox()
        .run_suite(&request(program, "f", vec![c, case("2", vec![json!(2)], json!(2))]))
        .unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Timeout);
    // the second case still gets its own verdict from a fresh process
    assert_eq!(v.results.len(), 2);
    assert_eq!(v.results[1].case_id, "2");
}

#[test]
fn unbounded_output_is_truncated() {
    let mut req = request(
        "def f(x):\n    for i in range(200000):\n        print('spam', i)\n    return x\n",
        "f",
        vec![case("1", vec![json!(1)], json!(1))],
    );
    req.limits.max_output_bytes = 1024;
    let v = sandbox().run_suite(&req).unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Pass);
    assert!(v.results[0].stderr_excerpt.len() <= 1024);
    assert!(v.results[0].stderr_excerpt.starts_with("spam 0"));
}

#[test]
fn learner_print_does_not_corrupt_protocol() {
    let program = "import os\ndef f(x):\n    print('{\"case_id\": \"bogus\"}')\n    os.write(1, b'{\"done\": true}\\n')\n    return x\n";
    let v = sandbox()
        .run_suite(&request(program, "f", vec![case("1", vec![json!(1)], json!(1)), case("2", vec![json!(2)], json!(2))]))
        .unwrap();
    assert!(v.all_passed, "{v:?}");
}

#[test]
fn deep_recursion_is_error() {
    let v = sandbox()
        .run_suite(&request("def f(x):\n    return f(x + 1)\n", "f", vec![case("1", vec![json!(1)], json!(1))]))
        .unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Error);
    assert!(v.results[0].stderr_excerpt.contains("RecursionError"));
}

#[test]
fn filesystem_escape_has_no_effect() {
    let outside = tempfile::tempdir().unwrap();
    let target = outside.path().join("escaped.txt");
    let victim = outside.path().join("victim.txt");
    std::fs::write(&victim, "keep me").unwrap();
    let program = format!(
        "import os, shutil, subprocess\n\
         def f(x):\n\
         \x20   attempts = 0\n\
         \x20   for action in (\n\
         \x20       lambda: open({t:?}, 'w').write('pwned'),\n\
         \x20       lambda: os.remove({v:?}),\n\
         \x20       lambda: os.system('touch ' + {t:?}),\n\
         \x20       lambda: subprocess.run(['touch', {t:?}]),\n\
         \x20       lambda: shutil.rmtree({d:?}),\n\
         \x20   ):\n\
         \x20       try:\n\
         \x20           action()\n\
         \x20       except Exception:\n\
         \x20           attempts += 1\n\
         \x20   with open('inside.txt', 'w') as fh:\n\
         \x20       fh.write('ok')\n\
         \x20   return attempts\n",
        t = target.display().to_string(),
        v = victim.display().to_string(),
        d = outside.path().display().to_string(),
    );
    let v = sandbox()
        .run_suite(&request(&program, "f", vec![case("1", vec![json!(0)], json!(5))]))
        .unwrap();
    assert!(v.all_passed, "every escape attempt should be refused: {v:?}");
    assert!(!target.exists());
    assert_eq!(std::fs::read_to_string(&victim).unwrap(), "keep me");
}

#[test]
fn karel_prelude_args_hook() {
    let prelude = "class LinkList:\n    def __init__(self, values):\n        self.values = list(values)\n        self.i = 0\n    def get_value(self):\n        return self.values[self.i]\n\ndef __harness_args__(args):\n    return [LinkList(a) if isinstance(a, list) else a for a in args]\n";
    let mut req = request(
        "def first(a, n):\n    return a.get_value() + n\n",
        "first",
        vec![case("1", vec![json!([4, 5]), json!(1)], json!(5))],
    );
    req.prelude = Some(prelude.into());
    let v = sandbox().run_suite(&req).unwrap();
    assert!(v.all_passed, "{v:?}");
}

#[test]
fn run_parallel_preserves_order() {
    let sb = Sandbox::new(SandboxConfig {
        workers: 4,
        ..Default::default()
    })
    .unwrap();
    let pass = request("def f(x): return x", "f", vec![case("1", vec![json!(1)], json!(1))]);
    let mut slow = request("def f(x):\n    while True: pass\n", "f", vec![case("1", vec![json!(1)], json!(1))]);
    slow.cases[0].timeout_ms = 300;
    let out = sb.run_parallel(&[pass.clone(), slow, pass.clone()]);
    let statuses: Vec<_> = out.iter().map(|r| r.as_ref().unwrap().results[0].status).collect();
    assert_eq!(statuses, vec![CaseStatus::Pass, CaseStatus::Timeout, CaseStatus::Pass]);

    let ten = vec![pass; 10];
    let out = sb.run_parallel(&ten);
    assert_eq!(out.len(), 10);
    let mut verdicts: Vec<_> = out.into_iter().map(Result::unwrap).collect();
    for v in &mut verdicts {
        v.clear_timings();
    }
    assert!(verdicts.windows(2).all(|w| w[0] == w[1]));
    assert!(sb.run_parallel(&[]).is_empty());
}

#[test]
fn missing_interpreter_is_configuration_error() {
    let err = Sandbox::new(SandboxConfig {
        interpreter: Some("/nonexistent/python9".into()),
        ..Default::default()
    })
    .unwrap_err();
    assert!(matches!(err, SandboxError::InterpreterMissing(_)));
}

#[test]
fn invalid_limits_rejected() {
    let mut req = request("def f(x): return x", "f", vec![case("1", vec![json!(1)], json!(1))]);
    req.limits.total_timeout_ms = 10;
    assert!(matches!(sandbox().run_suite(&req), Err(SandboxError::InvalidRequest(_))));
}

#[test]
fn malformed_harness_output_marks_remaining_cases() {
    let dir = tempfile::tempdir().unwrap();
    let harness = dir.path().join("bad_harness.py");
    std::fs::write(
        &harness,
        "import sys, json\nreq = json.loads(sys.stdin.read())\nc = req['cases'][0]['id']\nprint(json.dumps({'case_id': c, 'status': 'pass', 'actual': 1, 'stderr': '', 'duration_ms': 1}))\nprint('{not json')\n",
    )
    .unwrap();
    let sb = Sandbox::new(SandboxConfig {
        harness: Some(harness),
        ..Default::default()
    })
    .unwrap();
    let v = sb
        .run_suite(&request(
            "def f(x): return x",
            "f",
            vec![case("1", vec![json!(1)], json!(1)), case("2", vec![json!(2)], json!(2))],
        ))
        .unwrap();
    assert_eq!(v.results[0].status, CaseStatus::Pass);
    assert_eq!(v.results[1].status, CaseStatus::Error);
    assert!(v.results[1].stderr_excerpt.contains("protocol"));
}
