//! Query preparation: templates with `{name}` placeholders extracted from a
//! guide's named query blocks, and strict parameter substitution.
//!
//! `{{` and `}}` are escapes for literal braces. A `{` that does not open a
//! well-formed `{identifier}` marker is kept as is.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{format_timestamp, MemoryValue, Scalar};
use crate::tsg::{StepId, TsgDocument};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateOrigin {
    pub tsg_id: String,
    pub step: StepId,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub name: String,
    pub language: String,
    pub text: String,
    pub placeholders: Vec<String>,
    pub origin: Option<TemplateOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedQuery {
    pub template_name: String,
    pub text: String,
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QppError {
    #[error("duplicate template name `{0}`")]
    DuplicateTemplateName(String),
    #[error("template `{0}` is empty")]
    EmptyTemplate(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` holds a {kind} value, which has no query rendering")]
    UnrenderableValue { name: String, kind: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Segment<'a> {
    Literal(&'a str),
    Brace(char),
    Marker(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn segments<'a>(text: &'a str) -> Vec<Segment<'a>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    let flush = |out: &mut Vec<Segment<'a>>, from: usize, to: usize| {
        if from < to {
            out.push(Segment::Literal(&text[from..to]));
        }
    };
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                flush(&mut out, lit_start, i);
                out.push(Segment::Brace('{'));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                flush(&mut out, lit_start, i);
                out.push(Segment::Brace('}'));
                i += 2;
                lit_start = i;
            }
            b'{' => match text[i + 1..].find('}') {
                Some(off) if is_ident(&text[i + 1..i + 1 + off]) => {
                    flush(&mut out, lit_start, i);
                    out.push(Segment::Marker(&text[i + 1..i + 1 + off]));
                    i += off + 2;
                    lit_start = i;
                }
                _ => i += 1,
            },
            _ => i += 1,
        }
    }
    flush(&mut out, lit_start, bytes.len());
    out
}

/// Distinct placeholder names in order of first appearance.
pub fn scan_placeholders(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    segments(text)
        .into_iter()
        .filter_map(|s| match s {
            Segment::Marker(name) if seen.insert(name) => Some(name.to_string()),
            _ => None,
        })
        .collect()
}

impl QueryTemplate {
    pub fn new(name: impl Into<String>, language: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        QueryTemplate {
            name: name.into(),
            language: language.into(),
            placeholders: scan_placeholders(&text),
            text,
            origin: None,
        }
    }
}

/// One template per named query block, in document order.
pub fn extract_templates(doc: &TsgDocument) -> Result<Vec<QueryTemplate>, QppError> {
    let mut names = BTreeSet::new();
    let mut out = Vec::new();
    for step in &doc.steps {
        for block in &step.query_blocks {
            if !names.insert(block.name.as_str()) {
                return Err(QppError::DuplicateTemplateName(block.name.clone()));
            }
            if block.text.trim().is_empty() {
                return Err(QppError::EmptyTemplate(block.name.clone()));
            }
            let mut t = QueryTemplate::new(&block.name, &block.language, &block.text);
            t.origin = Some(TemplateOrigin {
                tsg_id: doc.tsg_id.clone(),
                step: step.id.clone(),
                line: block.line,
            });
            out.push(t);
        }
    }
    Ok(out)
}

/// Text form of a parameter value: strings verbatim, numbers in canonical
/// decimal form, timestamps as ISO-8601 UTC, lists comma-joined.
pub fn render_param(name: &str, value: &MemoryValue) -> Result<String, QppError> {
    fn scalar(s: &Scalar) -> String {
        match s {
            Scalar::Timestamp(t) => format_timestamp(t),
            other => other.to_string(),
        }
    }
    match value {
        MemoryValue::Scalar(s) => Ok(scalar(s)),
        MemoryValue::List(items) => Ok(items.iter().map(scalar).collect::<Vec<_>>().join(", ")),
        other => Err(QppError::UnrenderableValue {
            name: name.to_string(),
            kind: other.kind().to_string(),
        }),
    }
}

/// Substitutes every placeholder of `tmpl`. Parameters outside the
/// placeholder set are rejected.
pub fn prepare_query(
    tmpl: &QueryTemplate,
    params: &BTreeMap<String, MemoryValue>,
) -> Result<PreparedQuery, QppError> {
    if let Some(missing) = tmpl.placeholders.iter().find(|p| !params.contains_key(*p)) {
        return Err(QppError::MissingParameter(missing.clone()));
    }
    if let Some(unknown) = params.keys().find(|k| !tmpl.placeholders.contains(k)) {
        return Err(QppError::UnknownParameter(unknown.clone()));
    }
    let bindings = params
        .iter()
        .map(|(k, v)| Ok((k.clone(), render_param(k, v)?)))
        .collect::<Result<BTreeMap<_, _>, QppError>>()?;
    let mut text = String::with_capacity(tmpl.text.len());
    for seg in segments(&tmpl.text) {
        match seg {
            Segment::Literal(s) => text.push_str(s),
            Segment::Brace(c) => text.push(c),
            Segment::Marker(name) => text.push_str(&bindings[name]),
        }
    }
    Ok(PreparedQuery {
        template_name: tmpl.name.clone(),
        text,
        bindings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub language: String,
    pub placeholders: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QppManifest {
    pub tsg_id: String,
    pub templates: Vec<ManifestEntry>,
}

impl QppManifest {
    pub fn new(tsg_id: &str, templates: &[QueryTemplate]) -> Self {
        let mut entries: Vec<ManifestEntry> = templates
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                language: t.language.clone(),
                placeholders: t.placeholders.clone(),
                text: t.text.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        QppManifest {
            tsg_id: tsg_id.to_string(),
            templates: entries,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Parses a manifest, checking each placeholder list against its text.
    pub fn from_json(text: &str) -> Result<QppManifest, QppError> {
        let m: QppManifest =
            serde_json::from_str(text).map_err(|e| QppError::Manifest(e.to_string()))?;
        let mut names = BTreeSet::new();
        for t in &m.templates {
            if !names.insert(t.name.as_str()) {
                return Err(QppError::DuplicateTemplateName(t.name.clone()));
            }
            if scan_placeholders(&t.text) != t.placeholders {
                return Err(QppError::Manifest(format!(
                    "placeholders of `{}` do not match its text",
                    t.name
                )));
            }
        }
        Ok(m)
    }

    pub fn templates(&self) -> Vec<QueryTemplate> {
        self.templates
            .iter()
            .map(|e| QueryTemplate {
                name: e.name.clone(),
                language: e.language.clone(),
                text: e.text.clone(),
                placeholders: e.placeholders.clone(),
                origin: None,
            })
            .collect()
    }

    pub fn template(&self, name: &str) -> Result<QueryTemplate, QppError> {
        self.templates()
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| QppError::UnknownTemplate(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, MemoryValue> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), MemoryValue::text(*v)))
            .collect()
    }

    #[test]
    fn ring_example() {
        let t = QueryTemplate::new("q", "kql", "Deployments\n| where DeployRing == '{ring}'\n| take 10");
        assert_eq!(t.placeholders, vec!["ring"]);
        let p = prepare_query(&t, &params(&[("ring", "test")])).unwrap();
        assert_eq!(p.text, "Deployments\n| where DeployRing == 'test'\n| take 10");
        assert_eq!(p.bindings["ring"], "test");
    }

    #[test]
    fn zero_placeholders_is_identity() {
        let t = QueryTemplate::new("q", "kql", "print 1");
        assert!(t.placeholders.is_empty());
        assert_eq!(prepare_query(&t, &BTreeMap::new()).unwrap().text, "print 1");
    }

    #[test]
    fn escapes() {
        let t = QueryTemplate::new("q", "kql", "{{literal}} and {start_time}");
        assert_eq!(t.placeholders, vec!["start_time"]);
        let p = prepare_query(&t, &params(&[("start_time", "2024-01-01")])).unwrap();
        assert_eq!(p.text, "{literal} and 2024-01-01");
        let odd = QueryTemplate::new("q", "kql", "{ not a marker } {1x} {a-b} {ok}");
        assert_eq!(odd.placeholders, vec!["ok"]);
    }

    #[test]
    fn parameter_errors() {
        let t = QueryTemplate::new("q", "kql", "{a} {b} {a}");
        assert_eq!(t.placeholders, vec!["a", "b"]);
        assert_eq!(
            prepare_query(&t, &params(&[("a", "x")])).unwrap_err(),
            QppError::MissingParameter("b".into())
        );
        assert_eq!(
            prepare_query(&t, &params(&[("a", "x"), ("b", "y"), ("c", "z")])).unwrap_err(),
            QppError::UnknownParameter("c".into())
        );
        let mut p = params(&[("a", "x")]);
        p.insert("b".into(), MemoryValue::Record(BTreeMap::new()));
        assert!(matches!(
            prepare_query(&t, &p).unwrap_err(),
            QppError::UnrenderableValue { .. }
        ));
    }

    #[test]
    fn value_rendering() {
        use crate::memory::parse_timestamp;
        assert_eq!(render_param("x", &MemoryValue::integer(-7)).unwrap(), "-7");
        assert_eq!(render_param("x", &MemoryValue::decimal(0.25)).unwrap(), "0.25");
        assert_eq!(render_param("x", &MemoryValue::decimal(3.0)).unwrap(), "3");
        let ts = parse_timestamp("2024-03-01T10:00:00+02:00").unwrap();
        assert_eq!(
            render_param("x", &MemoryValue::Scalar(Scalar::Timestamp(ts))).unwrap(),
            "2024-03-01T08:00:00Z"
        );
        let list = MemoryValue::List(vec![Scalar::Text("a".into()), Scalar::Integer(2)]);
        assert_eq!(render_param("x", &list).unwrap(), "a, 2");
    }

    #[test]
    fn manifest_is_sorted_and_round_trips() {
        let ts = vec![
            QueryTemplate::new("zeta", "kql", "{b}"),
            QueryTemplate::new("alpha", "kql", "{a} {{x}}"),
        ];
        let m = QppManifest::new("t", &ts);
        assert_eq!(m.templates[0].name, "alpha");
        let back = QppManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.template("zeta").unwrap().placeholders, vec!["b"]);
        assert!(matches!(back.template("nope"), Err(QppError::UnknownTemplate(_))));
    }

    fn template_text() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            "[a-z |=<>'\n]{0,8}".prop_map(|s| s),
            "[a-z][a-z0-9_]{0,5}".prop_map(|s| format!("{{{s}}}")),
        ];
        prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn substitution_is_local_and_closed(text in template_text(), value in "[A-Za-z0-9 ._:-]{0,12}") {
            let t = QueryTemplate::new("q", "kql", text.clone());
            let p: BTreeMap<String, MemoryValue> = t
                .placeholders
                .iter()
                .map(|n| (n.clone(), MemoryValue::text(value.clone())))
                .collect();
            let out = prepare_query(&t, &p).unwrap();
            prop_assert!(scan_placeholders(&out.text).is_empty());
            // Replacing each marker by hand reproduces the output.
            let mut expected = text.clone();
            for n in &t.placeholders {
                expected = expected.replace(&format!("{{{n}}}"), &value);
            }
            prop_assert_eq!(out.text, expected);
        }
    }
}
