//! Deterministic quality checks over guides and their evaluation against
//! seeded-defect manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qpp::scan_placeholders;
use crate::tsg::{parse_tsg_lenient, DiagnosticKind, DirectiveKind, TsgDocument};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    CP,
    CF,
    DF,
    DI,
    PS,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub rule: String,
    pub category: Category,
    pub line: usize,
    pub message: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleInfo {
    pub id: &'static str,
    pub category: Category,
    pub severity: Severity,
    pub summary: &'static str,
}

const fn rule(id: &'static str, category: Category, severity: Severity, summary: &'static str) -> RuleInfo {
    RuleInfo {
        id,
        category,
        severity,
        summary,
    }
}

pub const RULES: &[RuleInfo] = &[
    rule("CF-NEXT-MISSING", Category::CF, Severity::Error, "step has no next directive and does not terminate"),
    rule("CF-NEXT-DANGLING", Category::CF, Severity::Error, "directive targets an unknown step"),
    rule("DF-INPUT-UNKNOWN", Category::DF, Severity::Error, "query placeholder has no declared source"),
    rule("DI-HARDCODED-TIME", Category::DI, Severity::Warning, "query uses a literal time instead of a parameter"),
    rule("PS-TERMINATION-UNMARKED", Category::PS, Severity::Error, "final step ends without a Terminate marker"),
    rule("PS-STEP-ORDER", Category::PS, Severity::Warning, "step ids are not ascending"),
    rule("PS-MALFORMED-HEADER", Category::PS, Severity::Error, "heading does not follow the guide grammar"),
    rule("PS-DUPLICATE-STEP", Category::PS, Severity::Error, "step id declared twice"),
    rule("PS-UNPARSEABLE-DIRECTIVE", Category::PS, Severity::Error, "next directive cannot be parsed"),
    rule("PS-DUPLICATE-QUERY", Category::PS, Severity::Error, "query block name used twice"),
    rule("PS-UNTERMINATED-BLOCK", Category::PS, Severity::Error, "fenced block is never closed"),
    rule("CP-UNQUANTIFIED", Category::CP, Severity::Warning, "condition uses vague comparative wording"),
];

/// Rule id reported by the external analyzer hook; not part of [`RULES`].
pub const EXTERNAL_RULE: &str = "CP-EXTERNAL";

pub fn rule_info(id: &str) -> Option<&'static RuleInfo> {
    RULES.iter().find(|r| r.id == id)
}

fn finding(id: &str, line: usize, message: String) -> LintFinding {
    let info = rule_info(id).expect("registered rule");
    LintFinding {
        rule: id.to_string(),
        category: info.category,
        line,
        message,
        severity: info.severity,
    }
}

static AGO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bago\(\s*\d+(\.\d+)?\s*[a-zA-Z]+\s*\)").unwrap());
static DATETIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bdatetime\(\s*[^\s(){}][^()]*\)").unwrap());
static VAGUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(high|significant|many)\b").unwrap());

/// Runs every rule over a parsed guide. Findings are sorted by
/// (line, rule id).
pub fn lint(doc: &TsgDocument) -> Vec<LintFinding> {
    let mut out = Vec::new();

    for d in &doc.diagnostics {
        let id = match d.kind {
            DiagnosticKind::DanglingTarget => "CF-NEXT-DANGLING",
            DiagnosticKind::MalformedHeader => "PS-MALFORMED-HEADER",
            DiagnosticKind::DuplicateStepId => "PS-DUPLICATE-STEP",
            DiagnosticKind::UnparseableDirective => "PS-UNPARSEABLE-DIRECTIVE",
            DiagnosticKind::DuplicateQueryName => "PS-DUPLICATE-QUERY",
            DiagnosticKind::UnterminatedBlock => "PS-UNTERMINATED-BLOCK",
        };
        out.push(finding(id, d.line, d.message.clone()));
    }

    let last = doc.steps.len().saturating_sub(1);
    for (i, step) in doc.steps.iter().enumerate() {
        if step.next_directives.is_empty() && !step.is_terminal() {
            if i == last {
                out.push(finding(
                    "PS-TERMINATION-UNMARKED",
                    step.line,
                    format!("Step {} is the last step but has no `Terminate:` line", step.id),
                ));
            } else {
                out.push(finding(
                    "CF-NEXT-MISSING",
                    step.line,
                    format!("Step {} has no `Next:` directive and does not terminate", step.id),
                ));
            }
        }
    }

    let mut known: BTreeSet<&str> = doc.incident_fields.iter().map(String::as_str).collect();
    for step in &doc.steps {
        for block in &step.query_blocks {
            let mut reported = BTreeSet::new();
            for (i, line) in block.text.lines().enumerate() {
                let lineno = block.content_line(i);
                let names = scan_placeholders(line);
                for name in &names {
                    if !known.contains(name.as_str()) && reported.insert(name.clone()) {
                        out.push(finding(
                            "DF-INPUT-UNKNOWN",
                            lineno,
                            format!(
                                "placeholder {{{name}}} in `{}` is neither an input nor produced by an earlier step",
                                block.name
                            ),
                        ));
                    }
                }
                if names.is_empty() {
                    if let Some(m) = AGO.find(line).or_else(|| DATETIME.find(line)) {
                        out.push(finding(
                            "DI-HARDCODED-TIME",
                            lineno,
                            format!("`{}` fixes the time range; use a parameter", m.as_str()),
                        ));
                    }
                }
            }
        }
        known.extend(step.produces.iter().map(String::as_str));
    }

    let mut seen_lines = BTreeSet::new();
    for step in &doc.steps {
        for d in &step.next_directives {
            let Some(cond) = &d.condition else { continue };
            if d.kind != DirectiveKind::Conditional || !seen_lines.insert(d.line) {
                continue;
            }
            let q = &cond.question;
            let quantified = q.chars().any(|c| c.is_ascii_digit()) || !scan_placeholders(q).is_empty();
            if let (Some(m), false) = (VAGUE.find(q), quantified) {
                out.push(finding(
                    "CP-UNQUANTIFIED",
                    d.line,
                    format!("condition says `{}` without a threshold", m.as_str()),
                ));
            }
        }
    }

    for pair in doc.steps.windows(2) {
        if pair[1].id < pair[0].id {
            out.push(finding(
                "PS-STEP-ORDER",
                pair[1].line,
                format!("Step {} follows Step {}", pair[1].id, pair[0].id),
            ));
        }
    }

    out.sort_by(|a, b| a.line.cmp(&b.line).then_with(|| a.rule.cmp(&b.rule)));
    out
}

/// Parses leniently and lints. A document too broken to parse yields one
/// PS finding at line 1.
pub fn lint_source(text: &str) -> Vec<LintFinding> {
    match parse_tsg_lenient(text) {
        Ok(doc) => lint(&doc),
        Err(e) => vec![finding("PS-MALFORMED-HEADER", 1, e.to_string())],
    }
}

pub fn has_errors(findings: &[LintFinding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Error)
}

/// `<file>:<line>: <rule> [<category>/<severity>] <message>`, one per line.
pub fn format_text(file: &str, findings: &[LintFinding]) -> String {
    findings
        .iter()
        .map(|f| format!("{file}:{}: {} [{}/{}] {}\n", f.line, f.rule, f.category, f.severity, f.message))
        .collect()
}

/// Optional semantic checks served by an outside program. The program
/// receives the guide as one JSON line on stdin and answers with one line
/// `{"findings": [{"line": n, "message": "..."}]}`. Its findings are CP
/// warnings under [`EXTERNAL_RULE`].
#[derive(Debug, Clone)]
pub struct ExternalAnalyzer {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct ExternalReply {
    findings: Vec<ExternalFinding>,
}

#[derive(Deserialize)]
struct ExternalFinding {
    line: usize,
    message: String,
}

impl ExternalAnalyzer {
    pub fn analyze(&self, doc: &TsgDocument) -> Result<Vec<LintFinding>, LintError> {
        let fail = |m: String| LintError::Analyzer(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut line = serde_json::to_string(doc).map_err(|e| fail(e.to_string()))?;
        line.push('\n');
        let mut stdin = child.stdin.take().expect("piped");
        stdin.write_all(line.as_bytes()).map_err(|e| fail(e.to_string()))?;
        drop(stdin);
        let mut reply = String::new();
        BufReader::new(child.stdout.take().expect("piped"))
            .read_line(&mut reply)
            .map_err(|e| fail(e.to_string()))?;
        let _ = child.wait();
        let reply: ExternalReply = serde_json::from_str(reply.trim()).map_err(|e| fail(e.to_string()))?;
        Ok(reply
            .findings
            .into_iter()
            .map(|f| LintFinding {
                rule: EXTERNAL_RULE.to_string(),
                category: Category::CP,
                line: f.line,
                message: f.message,
                severity: Severity::Warning,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededDefect {
    pub rule: String,
    pub line: usize,
}

#[derive(Debug, Error)]
pub enum LintError {
    #[error("no manifest for {0}")]
    ManifestMissing(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("external analyzer failed: {0}")]
    Analyzer(String),
}

/// Matching window, in lines, between a finding and a seeded defect.
pub const LINE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Score {
    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        self.true_positives += tp;
        self.false_positives += fp;
        self.false_negatives += fn_;
    }

    fn finish(mut self) -> Self {
        let (tp, fp, fn_) = (self.true_positives as f64, self.false_positives as f64, self.false_negatives as f64);
        self.precision = (tp + fp > 0.0).then(|| tp / (tp + fp));
        self.recall = (tp + fn_ > 0.0).then(|| tp / (tp + fn_));
        self.f1 = match (self.precision, self.recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LintEvaluation {
    pub documents: usize,
    pub per_category: BTreeMap<Category, Score>,
    pub aggregate: Score,
}

fn category_of(rule: &str) -> Option<Category> {
    if let Some(info) = rule_info(rule) {
        return Some(info.category);
    }
    match rule.split('-').next()? {
        "CP" => Some(Category::CP),
        "CF" => Some(Category::CF),
        "DF" => Some(Category::DF),
        "DI" => Some(Category::DI),
        "PS" => Some(Category::PS),
        _ => None,
    }
}

/// Maximum one-to-one matching of findings to defects of the same rule
/// within [`LINE_WINDOW`] lines. Returns the matched pairs as indices.
pub fn match_findings(findings: &[LintFinding], defects: &[SeededDefect]) -> Vec<(usize, usize)> {
    let candidates: Vec<Vec<usize>> = defects
        .iter()
        .map(|d| {
            let mut c: Vec<usize> = findings
                .iter()
                .enumerate()
                .filter(|(_, f)| f.rule == d.rule && f.line.abs_diff(d.line) <= LINE_WINDOW)
                .map(|(i, _)| i)
                .collect();
            c.sort_by_key(|&i| (findings[i].line.abs_diff(d.line), i));
            c
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; findings.len()];
    fn augment(d: usize, cand: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &f in &cand[d] {
            if seen[f] {
                continue;
            }
            seen[f] = true;
            if owner[f].is_none_or(|o| augment(o, cand, seen, owner)) {
                owner[f] = Some(d);
                return true;
            }
        }
        false
    }
    for d in 0..defects.len() {
        augment(d, &candidates, &mut vec![false; findings.len()], &mut owner);
    }
    let mut pairs: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(f, d)| d.map(|d| (f, d))).collect();
    pairs.sort_by_key(|&(f, d)| (d, f));
    pairs
}

/// Precision, recall and F1 per category and overall. Findings from the
/// external analyzer are ignored.
pub fn evaluate_lint(corpus: &[(Vec<LintFinding>, Vec<SeededDefect>)]) -> LintEvaluation {
    let mut per: BTreeMap<Category, Score> = BTreeMap::new();
    let mut total = Score::default();
    for (findings, defects) in corpus {
        let findings: Vec<LintFinding> = findings.iter().filter(|f| f.rule != EXTERNAL_RULE).cloned().collect();
        let pairs = match_findings(&findings, defects);
        let matched_f: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let matched_d: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        for (i, f) in findings.iter().enumerate() {
            let (tp, fp) = if matched_f.contains(&i) { (1, 0) } else { (0, 1) };
            per.entry(f.category).or_default().add(tp, fp, 0);
            total.add(tp, fp, 0);
        }
        for (i, d) in defects.iter().enumerate() {
            if !matched_d.contains(&i) {
                if let Some(c) = category_of(&d.rule) {
                    per.entry(c).or_default().add(0, 0, 1);
                }
                total.add(0, 0, 1);
            }
        }
    }
    LintEvaluation {
        documents: corpus.len(),
        per_category: per.into_iter().map(|(c, s)| (c, s.finish())).collect(),
        aggregate: total.finish(),
    }
}

/// One corpus document with its findings and seeded defects.
#[derive(Debug, Clone)]
pub struct CorpusDocument {
    pub path: PathBuf,
    pub findings: Vec<LintFinding>,
    pub defects: Vec<SeededDefect>,
}

/// Loads every `*.md` in `dir` together with its `<stem>.manifest.json`.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusDocument>, LintError> {
    let io = |p: &Path, e: std::io::Error| LintError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("md"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let manifest_path = path.with_file_name(format!("{stem}.manifest.json"));
        if !manifest_path.exists() {
            return Err(LintError::ManifestMissing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| io(&manifest_path, e))?;
        let defects: Vec<SeededDefect> = serde_json::from_str(&manifest).map_err(|e| LintError::Manifest {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        out.push(CorpusDocument {
            findings: lint_source(&text),
            path,
            defects,
        });
    }
    Ok(out)
}
