//! Conforming troubleshooting-guide documents.
//!
//! A conforming guide is ordinary markdown with a handful of line-oriented
//! conventions:
//!
//! ````text
//! # TSG: <tsg_id> — <title>
//! Inputs: <name>, <name>
//!
//! ## Step <id>: <title>
//! free text ...
//! ```kql name=<template>
//! ... {placeholder} ...
//! ```
//! Produces: <name>, <name>
//! Next:
//! - Step <id>
//! - Parallel: Step <id>, Step <id>
//! - If <question>: Y -> Step <id> | Terminate(<conclusion>); N -> ...
//! - Terminate: <conclusion>
//! ````
//!
//! A bare `Terminate: <conclusion>` line outside `Next:` marks the step as a
//! terminal step. Everything that is not one of these constructs is kept
//! verbatim in the step body.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dotted-decimal step identifier ("1", "3.2", "3.10").
///
/// Ordering compares numeric segments left to right, so "3.10" > "3.2".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepId(String);

impl StepId {
    pub fn parse(text: &str) -> Option<StepId> {
        let text = text.trim();
        if text.is_empty() {
            return None;
        }
        let valid = text
            .split('.')
            .all(|seg| !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()));
        valid.then(|| StepId(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn segments(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.split('.').map(|s| s.parse::<u64>().unwrap_or(u64::MAX))
    }
}

impl Ord for StepId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.segments()
            .cmp(other.segments())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for StepId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Y,
    N,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Y => f.write_str("Y"),
            Label::N => f.write_str("N"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub question: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    Unconditional,
    Conditional,
    Parallel,
    Terminate,
}

/// One outgoing transition of a step.
///
/// A conditional `If` line produces one directive per arm. An arm that
/// terminates carries its conclusion and no targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextDirective {
    pub kind: DirectiveKind,
    pub targets: Vec<StepId>,
    pub condition: Option<Condition>,
    pub conclusion: Option<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceText {
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBlock {
    pub name: String,
    pub language: String,
    pub text: String,
    /// Line of the opening fence.
    pub line: usize,
}

impl QueryBlock {
    /// Source line of the `index`-th content line of the block.
    pub fn content_line(&self, index: usize) -> usize {
        self.line + 1 + index
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsgStep {
    pub id: StepId,
    pub title: String,
    pub line: usize,
    pub body: Vec<SourceText>,
    pub query_blocks: Vec<QueryBlock>,
    pub next_directives: Vec<NextDirective>,
    pub produces: Vec<String>,
    pub produces_line: Option<usize>,
    pub terminal_conclusion: Option<String>,
    pub terminal_line: Option<usize>,
}

impl TsgStep {
    fn new(id: StepId, title: String, line: usize) -> Self {
        TsgStep {
            id,
            title,
            line,
            body: Vec::new(),
            query_blocks: Vec::new(),
            next_directives: Vec::new(),
            produces: Vec::new(),
            produces_line: None,
            terminal_conclusion: None,
            terminal_line: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_conclusion.is_some()
            || self
                .next_directives
                .iter()
                .any(|d| d.kind == DirectiveKind::Terminate)
    }

    /// Every step id referenced by this step's directives.
    pub fn targets(&self) -> impl Iterator<Item = (&StepId, usize)> {
        self.next_directives
            .iter()
            .flat_map(|d| d.targets.iter().map(move |t| (t, d.line)))
    }

    /// Title, body and query text as one string, used as executor context.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        render_step(&mut out, self);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    MalformedHeader,
    DuplicateStepId,
    DanglingTarget,
    UnparseableDirective,
    DuplicateQueryName,
    UnterminatedBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsgDocument {
    pub tsg_id: String,
    pub title: String,
    pub incident_fields: Vec<String>,
    pub preamble: Vec<SourceText>,
    pub steps: Vec<TsgStep>,
    pub diagnostics: Vec<Diagnostic>,
    #[serde(skip)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: malformed header: {message}")]
    MalformedHeader { line: usize, message: String },
    #[error("line {line}: duplicate step id {id}")]
    DuplicateStepId { line: usize, id: String },
    #[error("line {line}: directive targets unknown step {target}")]
    DanglingTarget { line: usize, target: String },
    #[error("line {line}: {message}")]
    Unparseable { line: usize, message: String },
    #[error("document contains no steps")]
    MissingEntryStep,
}

impl From<&Diagnostic> for ParseError {
    fn from(d: &Diagnostic) -> Self {
        let line = d.line;
        let message = d.message.clone();
        match d.kind {
            DiagnosticKind::MalformedHeader => ParseError::MalformedHeader { line, message },
            DiagnosticKind::DuplicateStepId => ParseError::DuplicateStepId {
                line,
                id: message,
            },
            DiagnosticKind::DanglingTarget => ParseError::DanglingTarget {
                line,
                target: message,
            },
            _ => ParseError::Unparseable { line, message },
        }
    }
}

/// Parses a conforming guide, failing on the first diagnostic.
pub fn parse_tsg(markdown: &str) -> Result<TsgDocument, ParseError> {
    let doc = parse_tsg_lenient(markdown)?;
    match doc.diagnostics.first() {
        Some(d) => Err(d.into()),
        None => Ok(doc),
    }
}

/// Parses a guide, collecting recoverable problems as diagnostics.
///
/// Only a document without any step is rejected outright.
pub fn parse_tsg_lenient(markdown: &str) -> Result<TsgDocument, ParseError> {
    let mut parser = Parser::default();
    let lines: Vec<&str> = markdown.lines().collect();
    let mut idx = 0;
    while idx < lines.len() {
        idx = parser.line(&lines, idx);
    }
    parser.finish(markdown)
}

/// First step in source order.
pub fn entry_step(doc: &TsgDocument) -> &StepId {
    &doc.steps[0].id
}

impl TsgDocument {
    pub fn step(&self, id: &StepId) -> Option<&TsgStep> {
        self.steps.iter().find(|s| &s.id == id)
    }

    pub fn entry_step(&self) -> &StepId {
        entry_step(self)
    }

    /// Copy with every source position cleared, for structural comparison.
    pub fn without_positions(&self) -> TsgDocument {
        let mut doc = self.clone();
        doc.source.clear();
        doc.diagnostics.clear();
        for p in &mut doc.preamble {
            p.line = 0;
        }
        for step in &mut doc.steps {
            step.line = 0;
            step.produces_line = step.produces_line.map(|_| 0);
            step.terminal_line = step.terminal_line.map(|_| 0);
            step.body.iter_mut().for_each(|b| b.line = 0);
            step.query_blocks.iter_mut().for_each(|q| q.line = 0);
            step.next_directives.iter_mut().for_each(|d| d.line = 0);
        }
        doc
    }

    pub fn structurally_eq(&self, other: &TsgDocument) -> bool {
        self.without_positions() == other.without_positions()
    }
}

#[derive(Default)]
struct Parser {
    tsg_id: String,
    title: String,
    incident_fields: Vec<String>,
    preamble: Vec<SourceText>,
    steps: Vec<TsgStep>,
    diagnostics: Vec<Diagnostic>,
    in_next: bool,
    seen_ids: BTreeSet<StepId>,
    query_names: BTreeSet<String>,
}

impl Parser {
    fn diag(&mut self, kind: DiagnosticKind, line: usize, message: impl Into<String>) {
        self.diagnostics.push(Diagnostic {
            kind,
            line,
            message: message.into(),
        });
    }

    fn push_text(&mut self, line: usize, text: &str) {
        let entry = SourceText {
            line,
            text: text.to_string(),
        };
        match self.steps.last_mut() {
            Some(step) => step.body.push(entry),
            None => self.preamble.push(entry),
        }
    }

    /// Consumes the line at `idx` (plus any block it opens) and returns the
    /// index of the next unconsumed line.
    fn line(&mut self, lines: &[&str], idx: usize) -> usize {
        let raw = lines[idx];
        let lineno = idx + 1;
        let trimmed = raw.trim();

        if let Some(info) = trimmed.strip_prefix("```") {
            self.in_next = false;
            return self.fence(lines, idx, info.trim());
        }

        if let Some(rest) = trimmed.strip_prefix("## Step") {
            self.in_next = false;
            if rest.starts_with(char::is_whitespace) {
                match parse_step_header(rest) {
                    Ok((id, title)) => {
                        if !self.seen_ids.insert(id.clone()) {
                            self.diag(DiagnosticKind::DuplicateStepId, lineno, id.as_str());
                            self.push_text(lineno, raw);
                        } else {
                            self.steps.push(TsgStep::new(id, title, lineno));
                        }
                    }
                    Err(msg) => {
                        self.diag(DiagnosticKind::MalformedHeader, lineno, msg);
                        self.push_text(lineno, raw);
                    }
                }
                return idx + 1;
            }
        }

        if self.steps.is_empty() {
            if let Some(rest) = trimmed.strip_prefix("# TSG:") {
                match parse_doc_header(rest) {
                    Some((id, title)) => {
                        self.tsg_id = id;
                        self.title = title;
                    }
                    None => {
                        self.diag(
                            DiagnosticKind::MalformedHeader,
                            lineno,
                            format!("expected `# TSG: <id> — <title>`, found `{trimmed}`"),
                        );
                        self.push_text(lineno, raw);
                    }
                }
                return idx + 1;
            }
            if let Some(rest) = trimmed.strip_prefix("Inputs:") {
                self.incident_fields.extend(split_names(rest));
                return idx + 1;
            }
            self.push_text(lineno, raw);
            return idx + 1;
        }

        if trimmed == "Next:" {
            self.in_next = true;
            return idx + 1;
        }
        if self.in_next {
            if trimmed.is_empty() {
                return idx + 1;
            }
            if let Some(directive) = trimmed.strip_prefix("- ") {
                match parse_directive(directive.trim(), lineno) {
                    Ok(ds) => self.steps.last_mut().unwrap().next_directives.extend(ds),
                    Err(msg) => {
                        self.diag(DiagnosticKind::UnparseableDirective, lineno, msg);
                    }
                }
                return idx + 1;
            }
            self.in_next = false;
        }
        if let Some(rest) = trimmed.strip_prefix("Produces:") {
            let step = self.steps.last_mut().unwrap();
            step.produces.extend(split_names(rest));
            step.produces_line = Some(lineno);
            return idx + 1;
        }
        if let Some(rest) = trimmed.strip_prefix("Terminate:") {
            let conclusion = rest.trim();
            if conclusion.is_empty() {
                self.diag(
                    DiagnosticKind::UnparseableDirective,
                    lineno,
                    "Terminate requires a conclusion",
                );
            } else {
                let step = self.steps.last_mut().unwrap();
                step.terminal_conclusion = Some(conclusion.to_string());
                step.terminal_line = Some(lineno);
            }
            return idx + 1;
        }
        self.push_text(lineno, raw);
        idx + 1
    }

    fn fence(&mut self, lines: &[&str], start: usize, info: &str) -> usize {
        let close = lines[start + 1..]
            .iter()
            .position(|l| l.trim() == "```")
            .map(|off| start + 1 + off);
        let end = close.unwrap_or(lines.len());
        if close.is_none() {
            self.diag(
                DiagnosticKind::UnterminatedBlock,
                start + 1,
                "fenced block is never closed",
            );
        }

        let (language, name) = parse_info_string(info);
        match (name, self.steps.is_empty()) {
            (Some(name), false) => {
                if !self.query_names.insert(name.clone()) {
                    self.diag(DiagnosticKind::DuplicateQueryName, start + 1, name.clone());
                }
                let text = lines[start + 1..end].join("\n");
                self.steps.last_mut().unwrap().query_blocks.push(QueryBlock {
                    name,
                    language,
                    text,
                    line: start + 1,
                });
            }
            _ => {
                let last = close.unwrap_or(lines.len() - 1);
                for (i, raw) in lines.iter().enumerate().take(last + 1).skip(start) {
                    self.push_text(i + 1, raw);
                }
            }
        }
        end + 1
    }

    fn finish(mut self, source: &str) -> Result<TsgDocument, ParseError> {
        if self.steps.is_empty() {
            return Err(ParseError::MissingEntryStep);
        }
        let known: BTreeSet<&StepId> = self.steps.iter().map(|s| &s.id).collect();
        let mut dangling = Vec::new();
        for step in &self.steps {
            for (target, line) in step.targets() {
                if !known.contains(target) {
                    dangling.push((line, target.to_string()));
                }
            }
        }
        for (line, target) in dangling {
            self.diag(DiagnosticKind::DanglingTarget, line, target);
        }
        for step in &mut self.steps {
            trim_blank(&mut step.body);
        }
        trim_blank(&mut self.preamble);
        self.diagnostics.sort_by_key(|d| d.line);
        Ok(TsgDocument {
            tsg_id: self.tsg_id,
            title: self.title,
            incident_fields: self.incident_fields,
            preamble: self.preamble,
            steps: self.steps,
            diagnostics: self.diagnostics,
            source: source.to_string(),
        })
    }
}

fn trim_blank(lines: &mut Vec<SourceText>) {
    while lines.last().is_some_and(|l| l.text.trim().is_empty()) {
        lines.pop();
    }
    let lead = lines
        .iter()
        .take_while(|l| l.text.trim().is_empty())
        .count();
    lines.drain(..lead);
}

fn split_names(list: &str) -> Vec<String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_doc_header(rest: &str) -> Option<(String, String)> {
    let rest = rest.trim();
    let (id, title) = [" — ", " -- ", " - "]
        .iter()
        .find_map(|sep| rest.split_once(sep))?;
    let id = id.trim();
    if id.is_empty() || id.contains(char::is_whitespace) {
        return None;
    }
    Some((id.to_string(), title.trim().to_string()))
}

fn parse_step_header(rest: &str) -> Result<(StepId, String), String> {
    let (id, title) = rest
        .split_once(':')
        .ok_or_else(|| "expected `## Step <id>: <title>`".to_string())?;
    let id = StepId::parse(id).ok_or_else(|| format!("invalid step id `{}`", id.trim()))?;
    Ok((id, title.trim().to_string()))
}

/// Splits a fence info string into (language, template name).
fn parse_info_string(info: &str) -> (String, Option<String>) {
    let mut language = String::new();
    let mut name = None;
    for (i, word) in info.split_whitespace().enumerate() {
        if let Some(n) = word.strip_prefix("name=") {
            name = Some(n.to_string());
        } else if i == 0 {
            language = word.to_string();
        }
    }
    (language, name.filter(|n| !n.is_empty()))
}

fn parse_step_ref(text: &str) -> Result<StepId, String> {
    let text = text.trim();
    let id = text
        .strip_prefix("Step")
        .filter(|r| r.starts_with(char::is_whitespace))
        .ok_or_else(|| format!("expected `Step <id>`, found `{text}`"))?;
    StepId::parse(id).ok_or_else(|| format!("invalid step id `{}`", id.trim()))
}

fn parse_directive(text: &str, line: usize) -> Result<Vec<NextDirective>, String> {
    if let Some(rest) = text.strip_prefix("Parallel:") {
        let targets = rest
            .split(',')
            .map(parse_step_ref)
            .collect::<Result<Vec<_>, _>>()?;
        if targets.len() < 2 {
            return Err("Parallel requires at least two targets".into());
        }
        return Ok(vec![NextDirective {
            kind: DirectiveKind::Parallel,
            targets,
            condition: None,
            conclusion: None,
            line,
        }]);
    }
    if let Some(rest) = text.strip_prefix("Terminate:") {
        let conclusion = rest.trim();
        if conclusion.is_empty() {
            return Err("Terminate requires a conclusion".into());
        }
        return Ok(vec![NextDirective {
            kind: DirectiveKind::Terminate,
            targets: vec![],
            condition: None,
            conclusion: Some(conclusion.to_string()),
            line,
        }]);
    }
    if let Some(rest) = text.strip_prefix("If ") {
        return parse_conditional(rest, line);
    }
    let target = parse_step_ref(text)?;
    Ok(vec![NextDirective {
        kind: DirectiveKind::Unconditional,
        targets: vec![target],
        condition: None,
        conclusion: None,
        line,
    }])
}

/// Finds the colon that separates the question from its first arm.
fn arms_start(text: &str) -> Option<usize> {
    text.match_indices(':').map(|(i, _)| i).find(|&i| {
        let after = text[i + 1..].trim_start();
        (after.starts_with('Y') || after.starts_with('N')) && after[1..].trim_start().starts_with("->")
    })
}

fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(&text[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn parse_conditional(text: &str, line: usize) -> Result<Vec<NextDirective>, String> {
    let colon = arms_start(text).ok_or("expected `If <question>: Y -> ...; N -> ...`")?;
    let question = text[..colon].trim();
    if question.is_empty() {
        return Err("conditional directive has an empty question".into());
    }
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for arm in split_top_level(&text[colon + 1..], ';') {
        let arm = arm.trim();
        if arm.is_empty() {
            continue;
        }
        let (label, target) = arm
            .split_once("->")
            .ok_or_else(|| format!("malformed arm `{arm}`"))?;
        let label = match label.trim() {
            "Y" => Label::Y,
            "N" => Label::N,
            other => return Err(format!("arm label must be Y or N, found `{other}`")),
        };
        if seen.insert(label, ()).is_some() {
            return Err(format!("arm {label} listed twice"));
        }
        let target = target.trim();
        let condition = Some(Condition {
            question: question.to_string(),
            label,
        });
        if let Some(inner) = target.strip_prefix("Terminate(") {
            let conclusion = inner
                .strip_suffix(')')
                .ok_or_else(|| format!("unbalanced Terminate in `{arm}`"))?
                .trim();
            if conclusion.is_empty() {
                return Err("Terminate requires a conclusion".into());
            }
            out.push(NextDirective {
                kind: DirectiveKind::Conditional,
                targets: vec![],
                condition,
                conclusion: Some(conclusion.to_string()),
                line,
            });
        } else {
            out.push(NextDirective {
                kind: DirectiveKind::Conditional,
                targets: vec![parse_step_ref(target)?],
                condition,
                conclusion: None,
                line,
            });
        }
    }
    if out.is_empty() {
        return Err("conditional directive has no arms".into());
    }
    Ok(out)
}

/// Renders a document back into the conforming format.
pub fn serialize_tsg(doc: &TsgDocument) -> String {
    let mut out = String::new();
    out.push_str(&format!("# TSG: {} — {}\n", doc.tsg_id, doc.title));
    if !doc.incident_fields.is_empty() {
        out.push_str(&format!("Inputs: {}\n", doc.incident_fields.join(", ")));
    }
    for p in &doc.preamble {
        out.push_str(&p.text);
        out.push('\n');
    }
    for step in &doc.steps {
        out.push('\n');
        render_step(&mut out, step);
    }
    out
}

fn render_step(out: &mut String, step: &TsgStep) {
    out.push_str(&format!("## Step {}: {}\n", step.id, step.title));
    for b in &step.body {
        out.push_str(&b.text);
        out.push('\n');
    }
    for q in &step.query_blocks {
        out.push_str(&format!("```{} name={}\n", q.language, q.name));
        if !q.text.is_empty() {
            out.push_str(&q.text);
            out.push('\n');
        }
        out.push_str("```\n");
    }
    if !step.produces.is_empty() {
        out.push_str(&format!("Produces: {}\n", step.produces.join(", ")));
    }
    if let Some(c) = &step.terminal_conclusion {
        out.push_str(&format!("Terminate: {c}\n"));
    }
    if step.next_directives.is_empty() {
        return;
    }
    out.push_str("Next:\n");
    let mut i = 0;
    let ds = &step.next_directives;
    while i < ds.len() {
        let d = &ds[i];
        match d.kind {
            DirectiveKind::Unconditional => out.push_str(&format!("- Step {}\n", d.targets[0])),
            DirectiveKind::Parallel => {
                let list: Vec<String> = d.targets.iter().map(|t| format!("Step {t}")).collect();
                out.push_str(&format!("- Parallel: {}\n", list.join(", ")));
            }
            DirectiveKind::Terminate => out.push_str(&format!(
                "- Terminate: {}\n",
                d.conclusion.as_deref().unwrap_or_default()
            )),
            DirectiveKind::Conditional => {
                let question = &d.condition.as_ref().expect("conditional").question;
                let mut arms = Vec::new();
                while i < ds.len()
                    && ds[i].kind == DirectiveKind::Conditional
                    && ds[i].line == d.line
                    && ds[i].condition.as_ref().map(|c| &c.question) == Some(question)
                {
                    let arm = &ds[i];
                    let label = arm.condition.as_ref().unwrap().label;
                    let target = match (&arm.conclusion, arm.targets.first()) {
                        (Some(c), _) => format!("Terminate({c})"),
                        (None, Some(t)) => format!("Step {t}"),
                        (None, None) => String::new(),
                    };
                    arms.push(format!("{label} -> {target}"));
                    i += 1;
                }
                out.push_str(&format!("- If {question}: {}\n", arms.join("; ")));
                continue;
            }
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "# TSG: t1 — Minimal\n\n## Step 1: Check\nLook at it.\nTerminate: done\n";

    #[test]
    fn minimal_document() {
        let doc = parse_tsg(MINIMAL).unwrap();
        assert_eq!(doc.tsg_id, "t1");
        assert_eq!(doc.title, "Minimal");
        assert_eq!(doc.steps.len(), 1);
        let step = &doc.steps[0];
        assert_eq!(step.terminal_conclusion.as_deref(), Some("done"));
        assert!(step.next_directives.is_empty());
        assert_eq!(step.line, 3);
        assert_eq!(step.body[0].text, "Look at it.");
        assert_eq!(entry_step(&doc).as_str(), "1");
    }

    #[test]
    fn entry_step_is_source_order() {
        let text = "# TSG: t — T\n## Step 2: B\nNext:\n- Step 1\n## Step 1: A\nTerminate: x\n";
        let doc = parse_tsg(text).unwrap();
        assert_eq!(entry_step(&doc).as_str(), "2");
    }

    #[test]
    fn step_id_ordering_is_numeric() {
        let a = StepId::parse("3.10").unwrap();
        let b = StepId::parse("3.2").unwrap();
        assert!(a > b);
        assert!(StepId::parse("10").unwrap() > StepId::parse("9.9").unwrap());
        assert!(StepId::parse("3.a").is_none());
        assert!(StepId::parse("").is_none());
    }

    #[test]
    fn directives_of_every_kind() {
        let text = "\
# TSG: d — Directives
Inputs: service, start_time

## Step 1: Fan out
Next:
- Parallel: Step 2, Step 3
## Step 2: Ask
Next:
- If Is the error rate above 5%?: Y -> Terminate(known issue); N -> Step 3
## Step 3: Last
Next:
- Terminate: hand off
";
        let doc = parse_tsg(text).unwrap();
        assert_eq!(doc.incident_fields, vec!["service", "start_time"]);
        let s1 = &doc.steps[0];
        assert_eq!(s1.next_directives[0].kind, DirectiveKind::Parallel);
        assert_eq!(s1.next_directives[0].targets.len(), 2);
        let s2 = &doc.steps[1];
        assert_eq!(s2.next_directives.len(), 2);
        let y = &s2.next_directives[0];
        assert_eq!(y.condition.as_ref().unwrap().label, Label::Y);
        assert_eq!(y.condition.as_ref().unwrap().question, "Is the error rate above 5%?");
        assert_eq!(y.conclusion.as_deref(), Some("known issue"));
        assert!(y.targets.is_empty());
        let n = &s2.next_directives[1];
        assert_eq!(n.targets[0].as_str(), "3");
        assert_eq!(n.line, 9);
        let s3 = &doc.steps[2];
        assert_eq!(s3.next_directives[0].kind, DirectiveKind::Terminate);
        assert!(s3.is_terminal());
    }

    #[test]
    fn dangling_target_is_reported_with_line() {
        let mut text = String::from("# TSG: d — Dangling\n");
        for i in 1..=5 {
            text.push_str(&format!("## Step {i}: s{i}\nNext:\n"));
            if i == 3 {
                text.push_str("- Step 9\n");
            } else if i < 5 {
                text.push_str(&format!("- Step {}\n", i + 1));
            } else {
                text.push_str("- Terminate: end\n");
            }
        }
        let doc = parse_tsg_lenient(&text).unwrap();
        assert_eq!(doc.diagnostics.len(), 1);
        let d = &doc.diagnostics[0];
        assert_eq!(d.kind, DiagnosticKind::DanglingTarget);
        assert_eq!(d.message, "9");
        assert_eq!(text.lines().nth(d.line - 1).unwrap(), "- Step 9");
        assert_eq!(
            parse_tsg(&text).unwrap_err(),
            ParseError::DanglingTarget {
                line: d.line,
                target: "9".into()
            }
        );
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_tsg("# TSG: e — Empty\nno steps here\n").unwrap_err(),
            ParseError::MissingEntryStep
        );
        let dup = "# TSG: e — E\n## Step 1: a\nTerminate: x\n## Step 1: b\nTerminate: y\n";
        assert!(matches!(
            parse_tsg(dup).unwrap_err(),
            ParseError::DuplicateStepId { line: 4, .. }
        ));
        let bad = "# TSG: e — E\n## Step one: a\n## Step 1: a\nTerminate: x\n";
        assert!(matches!(
            parse_tsg(bad).unwrap_err(),
            ParseError::MalformedHeader { line: 2, .. }
        ));
        let junk = "# TSG: e — E\n## Step 1: a\nNext:\n- Go somewhere\n";
        let doc = parse_tsg_lenient(junk).unwrap();
        assert_eq!(doc.diagnostics[0].kind, DiagnosticKind::UnparseableDirective);
        assert_eq!(doc.diagnostics[0].line, 4);
    }

    #[test]
    fn query_blocks_and_plain_fences() {
        let text = "\
# TSG: q — Queries
## Step 1: Query
```kql name=top_errors
Errors
| where Ring == '{ring}'
```
```
## Step not a header inside a plain fence
```
Produces: errors
Terminate: done
";
        let doc = parse_tsg(text).unwrap();
        let step = &doc.steps[0];
        assert_eq!(step.query_blocks.len(), 1);
        let q = &step.query_blocks[0];
        assert_eq!(q.name, "top_errors");
        assert_eq!(q.language, "kql");
        assert_eq!(q.line, 3);
        assert_eq!(q.text, "Errors\n| where Ring == '{ring}'");
        assert_eq!(q.content_line(1), 5);
        assert_eq!(step.body.len(), 3);
        assert_eq!(step.produces, vec!["errors"]);
    }

    #[test]
    fn serialize_round_trip_is_stable() {
        let text = "\
# TSG: r — Round trip
Inputs: a
Some preamble.

## Step 1: First
Body line one.

Body line two.
```kql name=q1
T | where x == '{a}'
```
Produces: out
Next:
- If Is x above 3?: Y -> Step 2; N -> Terminate(nothing)
- Step 3
## Step 2: Second
Next:
- Parallel: Step 3, Step 4
## Step 3: Third
Terminate: done
## Step 4: Fourth
Next:
- Terminate: also done
";
        let first = parse_tsg(text).unwrap();
        let rendered = serialize_tsg(&first);
        let second = parse_tsg(&rendered).unwrap();
        assert!(first.structurally_eq(&second), "{rendered}");
        assert_eq!(serialize_tsg(&second), rendered);
    }
}
