//! Benchmarks for the hot paths: lexing, token edit distance (run once per
//! repair candidate), and the agreement statistic.

use criterion::{black_box, BenchmarkId, Criterion, Throughput};
use hintkit_core::evalbench::cohens_kappa;
use hintkit_core::pytokens::{token_edit_distance, tokenize};

const SMALL: &str = "def remove_extras(lst):\n    result = []\n    for x in lst:\n        if x in lst:\n            result.append(x)\n    return result\n";

/// A learner-sized program of roughly `lines` lines.
pub fn synthetic_program(lines: usize) -> String {
    let mut src = String::from("def solve(items, k):\n    total = 0\n");
    for i in 0..lines.saturating_sub(3) {
        match i % 4 {
            0 => src.push_str(&format!("    if items[{i}] > k:  # branch {i}\n")),
            1 => src.push_str(&format!("        total += items[{i}] * 2\n")),
            2 => src.push_str(&format!("    s{i} = 'text {i}' + str(total)\n")),
            _ => src.push_str(&format!("    total = max(total, len(items) - {i})\n")),
        }
    }
    src.push_str("    return total\n");
    src
}

/// Same program with every tenth line's operator flipped.
pub fn perturbed(src: &str) -> String {
    src.lines()
        .enumerate()
        .map(|(i, l)| if i % 10 == 5 { l.replace('>', "<").replace("+=", "-=") } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn lexer(c: &mut Criterion) {
    let mut group = c.benchmark_group("tokenize");
    for lines in [6, 40, 200] {
        let src = if lines == 6 { SMALL.to_string() } else { synthetic_program(lines) };
        group.throughput(Throughput::Bytes(src.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(lines), &src, |b, s| b.iter(|| tokenize(black_box(s))));
    }
    group.finish();
}

fn distance(c: &mut Criterion) {
    let mut group = c.benchmark_group("token_edit_distance");
    for lines in [10, 40, 120] {
        let a = tokenize(&synthetic_program(lines));
        let b = tokenize(&perturbed(&synthetic_program(lines)));
        group.bench_with_input(BenchmarkId::from_parameter(lines), &(a, b), |bench, (a, b)| {
            bench.iter(|| token_edit_distance(black_box(a), black_box(b)))
        });
    }
    group.finish();
}

fn kappa(c: &mut Criterion) {
    let pairs: Vec<(bool, bool)> = (0..10_000u32).map(|i| (i % 3 == 0, i % 7 < 3)).collect();
    c.bench_function("cohens_kappa/10000", |b| b.iter(|| cohens_kappa(black_box(&pairs))));
}

pub fn benchmarks(c: &mut Criterion) {
    lexer(c);
    distance(c);
    kappa(c);
}
