use std::fs;
use std::path::Path;

use hintkit_core::pytokens::{levenshtein, source_edit_distance, token_edit_distance, tokenize, TokenKind};
use proptest::prelude::*;

fn fixtures() -> Vec<(String, String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lexer");
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "py") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let source = fs::read_to_string(&path).unwrap();
            let golden = fs::read_to_string(path.with_extension("tokens")).unwrap();
            out.push((name, source, golden));
        }
    }
    out.sort();
    out
}

#[test]
fn token_streams_match_goldens() {
    let all = fixtures();
    assert_eq!(all.len(), 20);
    for (name, source, golden) in &all {
        let rendered = tokenize(source).render();
        assert_eq!(&rendered, golden, "{name}");
    }
}

#[test]
fn broken_fixtures_are_flagged_and_clean_ones_are_not() {
    for (name, source, _) in fixtures() {
        let ts = tokenize(&source);
        let expect_errors = ["17_", "18_", "19_", "20_"].iter().any(|p| name.starts_with(p));
        assert_eq!(ts.had_errors, expect_errors, "{name}");
        if name.starts_with("18_") {
            assert!(ts.tokens.iter().any(|t| t.kind == TokenKind::ErrorChar));
        }
    }
}

#[test]
fn comments_and_blank_lines_do_not_count() {
    let a = "def f(x):\n    return x + 1\n";
    let b = "# helper\ndef f(x):   # the function\n\n    return x+1   # add one\n\n";
    assert_eq!(source_edit_distance(a, b), 0);
    assert_eq!(source_edit_distance(a, "def f(x):\n    return x + 2\n"), 1);
    assert_eq!(source_edit_distance(a, "def f(x):\n    return x - 1\n"), 1);
}

#[test]
fn distance_worked_examples() {
    assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    assert_eq!(levenshtein::<u8>(b"", b"abc"), 3);
    assert_eq!(levenshtein(b"abc", b"abc"), 0);
    // identical text with a different kind is a different token
    let s = tokenize("x = 'a'\n");
    let n = tokenize("x = a\n");
    assert_eq!(token_edit_distance(&s, &n), 1);
}

/// Exponential recursion straight from the definition.
fn naive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive(ra, rb) + usize::from(x != y);
            sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
        }
    }
}

fn short_seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=6)
}

const SNIPPETS: &[&str] = &[
    "x = 1\n", "def f(a):\n    return a\n", "if x:\n    y = 2\n", "print(x)\n", "for i in range(3):\n    pass\n",
    "s = 'hi'\n", "l = [1, 2,\n 3]\n", "while x > 0:\n    x -= 1\n", "\n", "# note\n", "return\n",
];

fn program() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(SNIPPETS), 0..6).prop_map(|parts| parts.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn dp_agrees_with_recursive_definition(a in short_seq(), b in short_seq()) {
        prop_assert_eq!(levenshtein(&a, &b), naive(&a, &b));
    }

    #[test]
    fn metric_axioms(a in short_seq(), b in short_seq(), c in short_seq()) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn program_distance_axioms(a in program(), b in program(), c in program()) {
        let (ta, tb, tc) = (tokenize(&a), tokenize(&b), tokenize(&c));
        let ab = token_edit_distance(&ta, &tb);
        prop_assert_eq!(ab, token_edit_distance(&tb, &ta));
        prop_assert_eq!(token_edit_distance(&ta, &ta), 0);
        prop_assert!(token_edit_distance(&ta, &tc) <= ab + token_edit_distance(&tb, &tc));
    }

    #[test]
    fn tokenizer_is_total(s in "\\PC{0,200}") {
        let ts = tokenize(&s);
        let again = tokenize(&s);
        prop_assert_eq!(ts.render(), again.render());
    }

    #[test]
    fn tokenizer_is_total_on_code_like_bytes(s in "[ \\t\\n\\\\()\\[\\]{}:'\"#a-c0-9=+.]{0,80}") {
        let _ = tokenize(&s).render();
    }

    #[test]
    fn trailing_spaces_and_comments_are_ignored(a in program(), pad in " {0,3}") {
        let noisy: String = a
            .lines()
            .map(|l| if l.trim().is_empty() { format!("{l}{pad}\n") } else { format!("{l}{pad}  # c\n") })
            .collect();
        prop_assert_eq!(source_edit_distance(&a, &noisy), 0);
    }
}
