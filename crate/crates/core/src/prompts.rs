//! Versioned prompt template bundles and their rendering.
//!
//! Templates use `{name}` placeholders and `{#name}...{/name}` blocks that are
//! kept only when `name` has a non-empty value. Rendering is a single pass, so
//! braces inside substituted values are never interpreted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::FailingTestSet;
use crate::sandbox::CaseStatus;

pub const DEFAULT_PROMPT_SET: &str = "default-v1";

const BUILTIN_DEFAULT: &str = include_str!("../prompts/default-v1.json");

/// Placeholders a template may reference.
pub const PLACEHOLDERS: &[&str] = &[
    "problem_description",
    "failing_test_cases",
    "buggy_program",
    "repaired_program",
    "explanation_request",
    "mistake_description",
    "entry_function",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template '{template}': unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template '{template}': unclosed block {{#{name}}}")]
    UnclosedBlock { template: String, name: String },
    #[error("template '{template}': placeholder {{{name}}} has no value")]
    MissingValue { template: String, name: String },
    #[error("prompt bundle: {0}")]
    Load(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBundle {
    pub id: String,
    pub version: u32,
    pub repair_system: String,
    pub repair_template: String,
    pub hint_system: String,
    pub hint_template: String,
    pub explanation_request: String,
    pub explanation_only_request: String,
    pub format_reminder: String,
    pub buggy_programs_system: String,
    pub buggy_programs_template: String,
    pub teacher_system: String,
    pub teacher_template: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        serde_json::from_str(BUILTIN_DEFAULT).expect("built-in prompt bundle is valid")
    }
}

impl PromptBundle {
    /// Looks up a built-in bundle by id, or loads a bundle file when `name`
    /// is a path.
    pub fn resolve(name: &str) -> Result<Self, PromptError> {
        if name == DEFAULT_PROMPT_SET {
            return Ok(Self::default());
        }
        let path = Path::new(name);
        if path.is_file() {
            return Self::load(path);
        }
        Err(PromptError::Load(format!("unknown prompt set '{name}'")))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
        let bundle: Self =
            serde_json::from_str(&text).map_err(|e| PromptError::Load(format!("{}: {e}", path.display())))?;
        bundle.check()?;
        Ok(bundle)
    }

    /// Every template only references known placeholders and closes its blocks.
    pub fn check(&self) -> Result<(), PromptError> {
        for (name, template) in self.templates() {
            let mut all = Vars::new();
            for p in PLACEHOLDERS {
                all.set(p, "x");
            }
            render_named(name, template, &all)?;
        }
        Ok(())
    }

    fn templates(&self) -> [(&'static str, &str); 4] {
        [
            ("repair", &self.repair_template),
            ("hint", &self.hint_template),
            ("buggy_programs", &self.buggy_programs_template),
            ("teacher", &self.teacher_template),
        ]
    }
}

/// Placeholder values for one rendering.
#[derive(Debug, Clone, Default)]
pub struct Vars(BTreeMap<&'static str, String>);

impl Vars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) -> &mut Self {
        let key = PLACEHOLDERS
            .iter()
            .find(|p| **p == name)
            .unwrap_or_else(|| panic!("'{name}' is not a template placeholder"));
        self.0.insert(key, value.into());
        self
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.set(name, value);
        self
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

pub fn render(template: &str, vars: &Vars) -> Result<String, PromptError> {
    render_named("inline", template, vars)
}

fn render_named(label: &str, template: &str, vars: &Vars) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some((tag, tail)) = parse_tag(after) else {
            out.push('{');
            rest = after;
            continue;
        };
        match tag {
            Tag::Placeholder(name) => {
                check_known(label, name)?;
                let value = vars.get(name).ok_or_else(|| PromptError::MissingValue {
                    template: label.into(),
                    name: name.into(),
                })?;
                out.push_str(value);
                rest = tail;
            }
            Tag::Open(name) => {
                check_known(label, name)?;
                let close = format!("{{/{name}}}");
                let end = tail.find(&close).ok_or_else(|| PromptError::UnclosedBlock {
                    template: label.into(),
                    name: name.into(),
                })?;
                let body = &tail[..end];
                if vars.get(name).is_some_and(|v| !v.is_empty()) {
                    out.push_str(&render_named(label, body, vars)?);
                } else {
                    // still validate the dropped body
                    let mut probe = vars.clone();
                    for p in PLACEHOLDERS {
                        probe.0.entry(p).or_insert_with(String::new);
                    }
                    render_named(label, body, &probe)?;
                }
                rest = &tail[end + close.len()..];
            }
            Tag::Close(name) => {
                return Err(PromptError::UnclosedBlock {
                    template: label.into(),
                    name: name.into(),
                })
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

enum Tag<'a> {
    Placeholder(&'a str),
    Open(&'a str),
    Close(&'a str),
}

/// Parses `name}`, `#name}` or `/name}` at the start of `s`.
fn parse_tag(s: &str) -> Option<(Tag<'_>, &str)> {
    let (kind, body) = match s.as_bytes().first()? {
        b'#' => (1, &s[1..]),
        b'/' => (2, &s[1..]),
        _ => (0, s),
    };
    let end = body.find('}')?;
    let name = &body[..end];
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
        return None;
    }
    let tail = &body[end + 1..];
    let tag = match kind {
        1 => Tag::Open(name),
        2 => Tag::Close(name),
        _ => Tag::Placeholder(name),
    };
    Some((tag, tail))
}

fn check_known(label: &str, name: &str) -> Result<(), PromptError> {
    if PLACEHOLDERS.contains(&name) {
        Ok(())
    } else {
        Err(PromptError::UnknownPlaceholder {
            template: label.into(),
            name: name.into(),
        })
    }
}

/// Formats a JSON value the way a Python literal would print.
pub fn python_literal(v: &Value) -> String {
    match v {
        Value::Null => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => python_str(s),
        Value::Array(items) => {
            let parts: Vec<_> = items.iter().map(python_literal).collect();
            format!("[{}]", parts.join(", "))
        }
        Value::Object(map) => {
            let parts: Vec<_> = map
                .iter()
                .map(|(k, v)| format!("{}: {}", python_str(k), python_literal(v)))
                .collect();
            format!("{{{}}}", parts.join(", "))
        }
    }
}

fn python_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// One line per failing case: `f(args) → expected X, got Y`.
pub fn render_failing_tests(entry_function: &str, failing: &FailingTestSet) -> String {
    let mut lines = Vec::with_capacity(failing.cases.len());
    for fc in &failing.cases {
        let args: Vec<_> = fc.case.args.iter().map(python_literal).collect();
        let got = match fc.result.status {
            CaseStatus::Timeout => format!("timeout (no result within {} ms)", fc.case.timeout_ms),
            CaseStatus::Error => {
                let first = fc.result.stderr_excerpt.lines().next().unwrap_or("").trim();
                if first.is_empty() {
                    "error".to_string()
                } else {
                    format!("error: {first}")
                }
            }
            CaseStatus::Fail | CaseStatus::Pass => match &fc.result.actual {
                Some(v) => python_literal(v),
                None => "None".into(),
            },
        };
        lines.push(format!(
            "{entry_function}({}) → expected {}, got {got}",
            args.join(", "),
            python_literal(&fc.case.expected)
        ));
    }
    lines.join("\n")
}
