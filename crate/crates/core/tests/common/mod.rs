#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::Rng;

use tsgflow_core::dag::{DagEdge, DagNode, ExecutionDag, NodeKind};
use tsgflow_core::engine::{EdgeDecision, Scenario, ScenarioStep, ScriptedAttempt};
use tsgflow_core::harness::Bundle;
use tsgflow_core::tsg::{Condition, Label};

pub const BUNDLES: [&str; 3] = ["availability_sequential", "availability_parallel", "fanout"];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn bundle(name: &str) -> Bundle {
    Bundle::load(fixtures().join("bundles").join(name)).expect("bundle loads")
}

pub fn md_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "md"))
        .collect();
    v.sort();
    v
}

/// Every guide shipped with the fixtures.
pub fn all_guides() -> Vec<PathBuf> {
    let mut v = md_files(&fixtures().join("lint/clean"));
    v.extend(md_files(&fixtures().join("qpp/guides")));
    for b in BUNDLES {
        let dir = fixtures().join("bundles").join(b);
        v.push(dir.join("tsg.md"));
        if dir.join("baseline/tsg.md").exists() {
            v.push(dir.join("baseline/tsg.md"));
        }
    }
    v
}

fn node(id: &str, kind: NodeKind, step_ref: Option<String>) -> DagNode {
    DagNode {
        id: id.into(),
        kind,
        description: id.into(),
        step_ref,
    }
}

/// Random valid DAG with `step1..stepn` in topological order. Only the last
/// step leads to the end node, so the end is reached only after every other
/// node has resolved.
pub fn random_dag(rng: &mut StdRng, max_conditional: usize) -> ExecutionDag {
    let n = rng.gen_range(1..=8usize);
    let id = |i: usize| format!("step{i}");
    let mut nodes = vec![node("start", NodeKind::Start, None)];
    nodes.extend((1..=n).map(|i| node(&id(i), NodeKind::Step, Some(i.to_string()))));
    nodes.push(node("end", NodeKind::End, None));
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::from([(0, 1)]);
    for i in 2..=n {
        for _ in 0..rng.gen_range(1..=3) {
            pairs.insert((rng.gen_range(0..i), i));
        }
    }
    for i in 1..n {
        if !pairs.iter().any(|&(a, _)| a == i) {
            pairs.insert((i, rng.gen_range(i + 1..=n)));
        }
        if rng.gen_bool(0.3) {
            pairs.insert((i, rng.gen_range(i + 1..=n)));
        }
    }
    let name = |i: usize| if i == 0 { "start".to_string() } else { id(i) };
    let mut edges = Vec::new();
    let mut conditional = 0;
    for &(a, b) in &pairs {
        let mut e = DagEdge::new(&name(a), &id(b));
        if a > 0 && conditional < max_conditional && rng.gen_bool(0.6) {
            let label = if rng.gen_bool(0.5) { Label::Y } else { Label::N };
            e.condition = Some(Condition {
                question: format!("Does check {a} hold?"),
                label,
            });
            conditional += 1;
        }
        edges.push(e);
    }
    let mut last = DagEdge::new(&id(n), "end");
    last.conclusion = Some("done".into());
    edges.push(last);
    ExecutionDag {
        tsg_id: "random".into(),
        nodes,
        edges,
    }
}

/// Scenario giving every step one successful attempt with the given
/// latency and decisions for its conditional edges.
pub fn decided_scenario(
    dag: &ExecutionDag,
    latencies: &BTreeMap<String, f64>,
    decisions: &BTreeMap<String, bool>,
) -> Scenario {
    let mut steps = BTreeMap::new();
    for n in dag.step_nodes() {
        let mut a = ScriptedAttempt::success(latencies[&n.id]);
        for e in dag.outgoing(&n.id).filter(|e| e.is_conditional()) {
            let d = if decisions[&e.id] { EdgeDecision::Enable } else { EdgeDecision::Disable };
            a.edge_decisions.insert(e.id.clone(), d);
        }
        steps.insert(n.id.clone(), ScenarioStep { attempts: vec![a] });
    }
    Scenario {
        id: "generated".into(),
        incident: Default::default(),
        steps,
    }
}

/// Linear DAG `start -> step1 -> ... -> stepn -> end`.
pub fn linear(n: usize) -> ExecutionDag {
    let mut nodes = vec![node("start", NodeKind::Start, None)];
    let mut edges = Vec::new();
    let mut prev = "start".to_string();
    for i in 1..=n {
        let id = format!("step{i}");
        nodes.push(node(&id, NodeKind::Step, Some(i.to_string())));
        edges.push(DagEdge::new(&prev, &id));
        prev = id;
    }
    nodes.push(node("end", NodeKind::End, None));
    let mut last = DagEdge::new(&prev, "end");
    last.conclusion = Some("resolved".into());
    edges.push(last);
    ExecutionDag {
        tsg_id: "linear".into(),
        nodes,
        edges,
    }
}

pub fn linear_scenario(n: usize, node: &str, attempts: Vec<ScriptedAttempt>) -> Scenario {
    let mut steps: BTreeMap<String, ScenarioStep> = (1..=n)
        .map(|i| {
            (
                format!("step{i}"),
                ScenarioStep {
                    attempts: vec![ScriptedAttempt::success(1.0)],
                },
            )
        })
        .collect();
    steps.insert(node.into(), ScenarioStep { attempts });
    Scenario {
        id: "linear".into(),
        incident: Default::default(),
        steps,
    }
}
