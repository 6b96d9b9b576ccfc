mod common;

use common::{all_guides, fixtures};
use tsgflow_core::dag::{edge_id, extract_dag, load_dag, serialize_dag, validate_dag, NodeKind};
use tsgflow_core::lint::{lint, lint_source, rule_info, RULES};
use tsgflow_core::qpp::{extract_templates, scan_placeholders, QppManifest};
use tsgflow_core::tsg::{parse_tsg, serialize_tsg};

fn guides() -> Vec<(String, String)> {
    all_guides()
        .into_iter()
        .map(|p| (p.display().to_string(), std::fs::read_to_string(&p).unwrap()))
        .collect()
}

#[test]
fn every_fixture_guide_round_trips() {
    for (name, text) in guides() {
        let doc = parse_tsg(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = parse_tsg(&serialize_tsg(&doc)).unwrap();
        assert!(doc.structurally_eq(&again), "{name}");
        assert_eq!(parse_tsg(&text).unwrap(), doc, "{name}");
    }
}

#[test]
fn positions_point_into_the_source() {
    for (name, text) in guides() {
        let lines: Vec<&str> = text.lines().collect();
        let at = |n: usize| lines[n - 1].trim();
        let doc = parse_tsg(&text).unwrap();
        for s in &doc.steps {
            assert!(at(s.line).starts_with(&format!("## Step {}", s.id)), "{name}:{}", s.line);
            for d in &s.next_directives {
                assert!(at(d.line).starts_with("- "), "{name}:{}", d.line);
            }
            for q in &s.query_blocks {
                assert!(at(q.line).starts_with("```") && at(q.line).contains(&q.name), "{name}:{}", q.line);
            }
            if let Some(l) = s.terminal_line {
                assert!(at(l).starts_with("Terminate:"), "{name}:{l}");
            }
        }
    }
}

#[test]
fn extracted_dags_satisfy_their_invariants() {
    for (name, text) in guides() {
        let doc = parse_tsg(&text).unwrap();
        let dag = extract_dag(&doc).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(validate_dag(&dag).is_valid(), "{name}: {:?}", validate_dag(&dag));
        assert_eq!(dag.nodes.len(), doc.steps.len() + 2, "{name}");
        for e in &dag.edges {
            assert_eq!(e.id, edge_id(&e.from, &e.to));
            assert_eq!(e.id, format!("edge_{}_{}", e.from, e.to));
            let into_end = dag.node(&e.to).unwrap().kind == NodeKind::End;
            assert!(e.conclusion.is_none() || into_end, "{}", e.id);
        }
        let arms: usize = doc.steps.iter().flat_map(|s| &s.next_directives).filter(|d| d.condition.is_some()).count();
        assert_eq!(dag.edges.iter().filter(|e| e.is_conditional()).count(), arms, "{name}");
        assert_eq!(extract_dag(&doc).unwrap(), dag);
        assert_eq!(load_dag(&serialize_dag(&dag)).unwrap(), dag, "{name}");
    }
}

#[test]
fn manifests_round_trip_and_placeholders_match() {
    for (name, text) in guides() {
        let doc = parse_tsg(&text).unwrap();
        let templates = extract_templates(&doc).unwrap();
        for t in &templates {
            assert_eq!(t.placeholders, scan_placeholders(&t.text), "{name}: {}", t.name);
        }
        let manifest = QppManifest::new(&doc.tsg_id, &templates);
        let json = manifest.to_json();
        let back = QppManifest::from_json(&json).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.to_json(), json);
        let names: Vec<&str> = back.templates.iter().map(|t| t.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}

#[test]
fn findings_use_registered_rules_and_real_lines() {
    let mut paths = all_guides();
    paths.extend(common::md_files(&fixtures().join("lint/seeded")));
    for p in paths {
        let text = std::fs::read_to_string(&p).unwrap();
        let n = text.lines().count();
        let findings = lint_source(&text);
        for f in &findings {
            let info = rule_info(&f.rule).unwrap_or_else(|| panic!("unregistered rule {}", f.rule));
            assert_eq!((info.category, info.severity), (f.category, f.severity));
            assert!(f.line >= 1 && f.line <= n, "{}: {:?}", p.display(), f);
        }
        let mut sorted = findings.clone();
        sorted.sort_by(|a, b| a.line.cmp(&b.line).then_with(|| a.rule.cmp(&b.rule)));
        assert_eq!(findings, sorted);
    }
    let ids: std::collections::BTreeSet<&str> = RULES.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), RULES.len());
}

#[test]
fn availability_guide_is_lint_clean() {
    let text = std::fs::read_to_string(fixtures().join("bundles/availability_sequential/tsg.md")).unwrap();
    assert_eq!(lint(&parse_tsg(&text).unwrap()), vec![]);
}
