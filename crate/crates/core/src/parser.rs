//! Extraction of tool sequences from free-form planner text.

use serde::{Deserialize, Serialize};

use crate::registry::ToolRegistry;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown tool: {0}")]
    UnknownTool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    #[serde(rename = "not in registry")]
    NotInRegistry,
    #[serde(rename = "duplicate")]
    Duplicate,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::NotInRegistry => "not in registry",
            DropReason::Duplicate => "duplicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub span: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedPlan {
    pub tools: Vec<String>,
    pub dropped: Vec<Dropped>,
}

#[derive(Debug)]
struct Word<'t> {
    text: &'t str,
    lower: String,
    start: usize,
    end: usize,
    /// Punctuation separates this word from the previous one.
    boundary: bool,
    sentence_start: bool,
    /// Directly follows a `module:` marker.
    marked: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '\''
}

fn tokenize(text: &str) -> Vec<Word<'_>> {
    let mut words: Vec<Word> = Vec::new();
    let mut boundary = true;
    let mut sentence_start = true;
    let mut marker = false;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if is_word_char(c) {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if !is_word_char(d) {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
            let w = &text[i..end];
            let lower = w.to_lowercase();
            if lower == "module" && text[end..].trim_start().starts_with(':') {
                marker = true;
                boundary = true;
                continue;
            }
            words.push(Word {
                text: w,
                lower,
                start: i,
                end,
                boundary,
                sentence_start,
                marked: marker,
            });
            boundary = false;
            sentence_start = false;
            marker = false;
        } else if !c.is_whitespace() {
            boundary = true;
            if matches!(c, '.' | '!' | '?') {
                sentence_start = true;
            }
        } else if c == '\n' {
            boundary = true;
        }
    }
    words
}

/// Scans `text` for registry names, longest match first, case-insensitively.
/// Consecutive repeats of the same tool collapse to one; capitalized runs and
/// `module:` segments that name no registered tool are reported as dropped.
pub fn extract_sequence(text: &str, reg: &ToolRegistry) -> ParsedPlan {
    let names: Vec<(Vec<String>, &str)> = reg
        .names()
        .map(|n| (n.split_whitespace().map(str::to_lowercase).collect(), n))
        .collect();
    let words = tokenize(text);
    let mut out = ParsedPlan::default();
    let mut run: Option<(usize, usize)> = None;
    let mut in_marked = false;

    let flush = |run: &mut Option<(usize, usize)>, out: &mut ParsedPlan| {
        if let Some((s, e)) = run.take() {
            out.dropped.push(Dropped {
                span: text[s..e].to_string(),
                reason: DropReason::NotInRegistry,
            });
        }
    };

    let mut i = 0;
    while i < words.len() {
        let w = &words[i];
        if w.boundary {
            flush(&mut run, &mut out);
            in_marked = w.marked;
        }
        let hit = names
            .iter()
            .filter(|(ws, _)| {
                ws.len() <= words.len() - i
                    && ws.iter().enumerate().all(|(k, x)| {
                        let cand = &words[i + k];
                        *x == cand.lower && (k == 0 || !cand.boundary)
                    })
            })
            .max_by_key(|(ws, _)| ws.len());
        if let Some((ws, name)) = hit {
            flush(&mut run, &mut out);
            let span_end = words[i + ws.len() - 1].end;
            if out.tools.last().map(String::as_str) == Some(*name) {
                out.dropped.push(Dropped {
                    span: text[w.start..span_end].to_string(),
                    reason: DropReason::Duplicate,
                });
            } else {
                out.tools.push(name.to_string());
            }
            in_marked = false;
            i += ws.len();
            continue;
        }
        let capital = w.text.chars().next().is_some_and(char::is_uppercase);
        if in_marked || (capital && !w.sentence_start) {
            run = Some(run.map_or((w.start, w.end), |(s, _)| (s, w.end)));
        } else {
            flush(&mut run, &mut out);
        }
        i += 1;
    }
    flush(&mut run, &mut out);
    out
}

/// `module: A, module: B, ...`; empty for an empty sequence.
pub fn format_canonical<S: AsRef<str>>(tools: &[S], reg: &ToolRegistry) -> Result<String, ParseError> {
    let mut parts = Vec::with_capacity(tools.len());
    for t in tools {
        let t = t.as_ref();
        if !reg.contains(t) {
            return Err(ParseError::UnknownTool(t.to_string()));
        }
        parts.push(format!("module: {t}"));
    }
    Ok(parts.join(", "))
}

/// Key-phrase extraction prompt listing every registry name.
pub fn extractor_prompt(reg: &ToolRegistry, context: &str) -> String {
    let names: Vec<&str> = reg.names().collect();
    extractor_prompt_for(&names, context)
}

pub fn extractor_prompt_for<S: AsRef<str>>(names: &[S], context: &str) -> String {
    let list = names.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ");
    format!(
        "You are a key phrase extractor who is able to extract potential module names from the given context. \
You have already known all the module names in the full module list. The full module list is: [{list}]. \
Given the following context: '{context}'. Please extract a module sequence from this context and remove module names \
which do not exist in the full module list from this sequence. Output the module sequence after filtering as the format \
of 'module: module1, module: module2, module: module3, etc...'."
    )
}
