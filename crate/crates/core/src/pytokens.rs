//! Error-tolerant lexer for learner programs and token-level edit distance.
//!
//! The lexer follows the layout rules of the subject language: comments and
//! blank lines vanish, newlines inside brackets or after a backslash join
//! physical lines, and indentation changes become `INDENT`/`DEDENT` tokens.
//! Anything it cannot classify becomes an `ERRORCHAR` token and lexing goes on.

use std::fmt;

use serde::{Deserialize, Serialize};

const TAB_STOP: usize = 8;

const OPERATORS_3: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const OPERATORS_2: &[&str] = &[
    "!=", "%=", "&=", "**", "*=", "+=", "-=", "->", "//", "/=", ":=", "<<", "<=", "==", ">=",
    ">>", "@=", "^=", "|=",
];
const OPERATORS_1: &str = "%&()*+,-./:;<=>@[]^{|}~";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Name,
    Number,
    String,
    Op,
    Newline,
    Indent,
    Dedent,
    #[serde(rename = "ERRORCHAR")]
    ErrorChar,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Name => "NAME",
            TokenKind::Number => "NUMBER",
            TokenKind::String => "STRING",
            TokenKind::Op => "OP",
            TokenKind::Newline => "NEWLINE",
            TokenKind::Indent => "INDENT",
            TokenKind::Dedent => "DEDENT",
            TokenKind::ErrorChar => "ERRORCHAR",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// 1-based line.
    pub line: u32,
    /// 0-based character offset within the line.
    pub col: u32,
}

impl Token {
    /// The `(kind, text)` pair that edit distance compares.
    pub fn key(&self) -> (TokenKind, &str) {
        (self.kind, self.text.as_str())
    }
}

/// Renders as `kind\ttext\tline:col`. Backslash, newline, carriage return and
/// tab inside the text are escaped so every token stays on one line.
impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t", self.kind)?;
        for c in self.text.chars() {
            match c {
                '\\' => f.write_str("\\\\")?,
                '\n' => f.write_str("\\n")?,
                '\r' => f.write_str("\\r")?,
                '\t' => f.write_str("\\t")?,
                c => write!(f, "{c}")?,
            }
        }
        write!(f, "\t{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub had_errors: bool,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line in the debug format used by `tokens <file>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(&token.to_string());
            out.push('\n');
        }
        out
    }
}

/// Tokenizes `source`. Total: never fails, flags lexical trouble in
/// [`TokenStream::had_errors`].
pub fn tokenize(source: &str) -> TokenStream {
    Lexer::new(source).run()
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    line_start: usize,
    indents: Vec<usize>,
    depth: usize,
    /// Whether the current logical line has produced a token yet.
    line_has_tokens: bool,
    at_line_start: bool,
    out: TokenStream,
}

impl Lexer {
    fn new(source: &str) -> Self {
        Self {
            chars: source.chars().collect(),
            pos: 0,
            line: 1,
            line_start: 0,
            indents: vec![0],
            depth: 0,
            line_has_tokens: false,
            at_line_start: true,
            out: TokenStream::default(),
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).copied()
    }

    fn col_of(&self, pos: usize) -> u32 {
        (pos - self.line_start) as u32
    }

    fn push(&mut self, kind: TokenKind, text: String, line: u32, col: u32) {
        if !matches!(kind, TokenKind::Newline) {
            self.line_has_tokens = true;
        }
        self.out.tokens.push(Token { kind, text, line, col });
    }

    fn push_at(&mut self, kind: TokenKind, start: usize, line: u32, col: u32) {
        let text: String = self.chars[start..self.pos].iter().collect();
        self.push(kind, text, line, col);
    }

    /// Consumes a line break at `pos` if present, returning whether one was eaten.
    fn eat_line_break(&mut self) -> bool {
        match self.peek(0) {
            Some('\r') => {
                self.pos += 1;
                if self.peek(0) == Some('\n') {
                    self.pos += 1;
                }
            }
            Some('\n') => self.pos += 1,
            _ => return false,
        }
        self.line += 1;
        self.line_start = self.pos;
        true
    }

    fn run(mut self) -> TokenStream {
        while self.pos < self.chars.len() {
            if self.at_line_start && self.depth == 0 {
                self.at_line_start = false;
                if self.handle_indentation() {
                    continue;
                }
            }
            self.lex_one();
        }
        self.finish()
    }

    /// Measures indentation of a fresh logical line. Returns true when the
    /// line was blank or comment-only and has been consumed.
    fn handle_indentation(&mut self) -> bool {
        let mut column = 0usize;
        while let Some(c) = self.peek(0) {
            match c {
                ' ' => column += 1,
                '\t' => column = (column / TAB_STOP + 1) * TAB_STOP,
                '\x0c' => column = 0,
                _ => break,
            }
            self.pos += 1;
        }
        match self.peek(0) {
            None => return true,
            Some('#') => {
                self.skip_comment();
                self.eat_line_break();
                self.at_line_start = true;
                return true;
            }
            Some('\n') | Some('\r') => {
                self.eat_line_break();
                self.at_line_start = true;
                return true;
            }
            _ => {}
        }

        let col = self.col_of(self.pos);
        let current = *self.indents.last().expect("indent stack never empty");
        if column > current {
            self.indents.push(column);
            self.push(TokenKind::Indent, String::new(), self.line, 0);
        } else if column < current {
            while *self.indents.last().expect("indent stack never empty") > column {
                self.indents.pop();
                self.push(TokenKind::Dedent, String::new(), self.line, col);
            }
            if *self.indents.last().expect("indent stack never empty") != column {
                // dedent to a level that was never opened
                self.out.had_errors = true;
            }
        }
        false
    }

    fn skip_comment(&mut self) {
        while let Some(c) = self.peek(0) {
            if c == '\n' || c == '\r' {
                break;
            }
            self.pos += 1;
        }
    }

    fn lex_one(&mut self) {
        let c = match self.peek(0) {
            Some(c) => c,
            None => return,
        };
        let start = self.pos;
        let line = self.line;
        let col = self.col_of(start);

        match c {
            ' ' | '\t' | '\x0c' => self.pos += 1,
            '#' => self.skip_comment(),
            '\n' | '\r' => {
                if self.depth == 0 && self.line_has_tokens {
                    self.push(TokenKind::Newline, String::new(), line, col);
                    self.line_has_tokens = false;
                }
                self.eat_line_break();
                self.at_line_start = self.depth == 0;
            }
            '\\' => {
                self.pos += 1;
                if !self.eat_line_break() {
                    self.out.had_errors = true;
                    self.push_at(TokenKind::ErrorChar, start, line, col);
                } else if self.pos >= self.chars.len() {
                    // continuation into end of input
                    self.out.had_errors = true;
                }
            }
            '"' | '\'' => self.lex_string(start, line, col),
            c if c.is_ascii_digit() => self.lex_number(start, line, col),
            '.' if self.peek(1).is_some_and(|d| d.is_ascii_digit()) => {
                self.lex_number(start, line, col)
            }
            c if is_name_start(c) => self.lex_name(start, line, col),
            _ => self.lex_operator(start, line, col),
        }
    }

    fn lex_name(&mut self, start: usize, line: u32, col: u32) {
        while self.peek(0).is_some_and(is_name_continue) {
            self.pos += 1;
        }
        if matches!(self.peek(0), Some('"') | Some('\'')) {
            let prefix: String = self.chars[start..self.pos].iter().collect();
            if is_string_prefix(&prefix) {
                self.lex_string(start, line, col);
                return;
            }
        }
        self.push_at(TokenKind::Name, start, line, col);
    }

    fn lex_number(&mut self, start: usize, line: u32, col: u32) {
        let radix_prefix = self.peek(0) == Some('0')
            && matches!(self.peek(1), Some('x' | 'X' | 'o' | 'O' | 'b' | 'B'));
        if radix_prefix {
            self.pos += 2;
            while self
                .peek(0)
                .is_some_and(|c| c.is_ascii_hexdigit() || c == '_')
            {
                self.pos += 1;
            }
            self.push_at(TokenKind::Number, start, line, col);
            return;
        }

        self.eat_digits();
        if self.peek(0) == Some('.') {
            self.pos += 1;
            self.eat_digits();
        }
        if matches!(self.peek(0), Some('e' | 'E')) {
            let signed = matches!(self.peek(1), Some('+' | '-'));
            let digit_at = if signed { 2 } else { 1 };
            if self.peek(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                self.pos += digit_at;
                self.eat_digits();
            }
        }
        if matches!(self.peek(0), Some('j' | 'J')) {
            self.pos += 1;
        }
        self.push_at(TokenKind::Number, start, line, col);
    }

    fn eat_digits(&mut self) {
        while self
            .peek(0)
            .is_some_and(|c| c.is_ascii_digit() || c == '_')
        {
            self.pos += 1;
        }
    }

    /// `self.pos` sits on the opening quote; `start` may precede it by a prefix.
    fn lex_string(&mut self, start: usize, line: u32, col: u32) {
        let quote = self.peek(0).expect("caller checked quote");
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        let quote_pos = self.pos;
        let saved_line = (self.line, self.line_start);
        self.pos += if triple { 3 } else { 1 };

        let terminated = loop {
            match self.peek(0) {
                None => break false,
                Some('\\') => {
                    self.pos += 1;
                    if !self.eat_line_break() && self.peek(0).is_some() {
                        self.pos += 1;
                    }
                }
                Some(c) if c == quote => {
                    if !triple {
                        self.pos += 1;
                        break true;
                    }
                    if self.peek(1) == Some(quote) && self.peek(2) == Some(quote) {
                        self.pos += 3;
                        break true;
                    }
                    self.pos += 1;
                }
                Some('\n') | Some('\r') => {
                    if !triple {
                        break false;
                    }
                    self.eat_line_break();
                }
                Some(_) => self.pos += 1,
            }
        };

        if terminated {
            self.push_at(TokenKind::String, start, line, col);
            return;
        }

        // Unterminated: the prefix stays a name, the opening quote is an
        // error, and lexing resumes right after it.
        self.out.had_errors = true;
        self.pos = quote_pos;
        (self.line, self.line_start) = saved_line;
        if quote_pos > start {
            self.push_at(TokenKind::Name, start, line, col);
        }
        let qcol = self.col_of(quote_pos);
        self.pos = quote_pos + if triple { 3 } else { 1 };
        self.push_at(TokenKind::ErrorChar, quote_pos, line, qcol);
    }

    fn lex_operator(&mut self, start: usize, line: u32, col: u32) {
        let rest = |n: usize| -> Option<String> {
            (self.pos + n <= self.chars.len())
                .then(|| self.chars[self.pos..self.pos + n].iter().collect())
        };
        let width = if rest(3).is_some_and(|s| OPERATORS_3.contains(&s.as_str())) {
            3
        } else if rest(2).is_some_and(|s| OPERATORS_2.contains(&s.as_str())) {
            2
        } else if OPERATORS_1.contains(self.chars[self.pos]) {
            1
        } else {
            0
        };

        if width == 0 {
            self.pos += 1;
            self.out.had_errors = true;
            self.push_at(TokenKind::ErrorChar, start, line, col);
            return;
        }

        self.pos += width;
        match self.chars[start] {
            '(' | '[' | '{' if width == 1 => self.depth += 1,
            ')' | ']' | '}' if width == 1 => self.depth = self.depth.saturating_sub(1),
            _ => {}
        }
        self.push_at(TokenKind::Op, start, line, col);
    }

    fn finish(mut self) -> TokenStream {
        if self.depth > 0 {
            self.out.had_errors = true;
        }
        let ended_with_break = self.line_start == self.pos;
        if self.line_has_tokens {
            let col = self.col_of(self.pos);
            self.push(TokenKind::Newline, String::new(), self.line, col);
        }
        let dedent_line = if ended_with_break { self.line } else { self.line + 1 };
        while self.indents.len() > 1 {
            self.indents.pop();
            self.push(TokenKind::Dedent, String::new(), dedent_line, 0);
        }
        self.out
    }
}

fn is_name_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_name_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

fn is_string_prefix(prefix: &str) -> bool {
    matches!(
        prefix.to_ascii_lowercase().as_str(),
        "r" | "u" | "b" | "f" | "br" | "rb" | "fr" | "rf"
    )
}

/// Unit-cost Levenshtein distance over any comparable sequence.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(x != y);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over the `(kind, text)` pairs of two token streams.
pub fn token_edit_distance(a: &TokenStream, b: &TokenStream) -> usize {
    let ka: Vec<_> = a.tokens.iter().map(Token::key).collect();
    let kb: Vec<_> = b.tokens.iter().map(Token::key).collect();
    levenshtein(&ka, &kb)
}

/// Convenience: tokenize both sources and compare.
pub fn source_edit_distance(a: &str, b: &str) -> usize {
    token_edit_distance(&tokenize(a), &tokenize(b))
}
