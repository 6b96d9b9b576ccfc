//! Execution DAG: extraction from a guide, validation and the JSON file form.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tsg::{Condition, DirectiveKind, Label, StepId, TsgDocument};

pub const START: &str = "start";
pub const END: &str = "end";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Start,
    Step,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: String,
    pub kind: NodeKind,
    pub description: String,
    pub step_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagEdge {
    pub id: String,
    pub from: String,
    pub to: String,
    pub condition: Option<Condition>,
    pub conclusion: Option<String>,
}

impl DagEdge {
    pub fn new(from: &str, to: &str) -> Self {
        DagEdge {
            id: edge_id(from, to),
            from: from.to_string(),
            to: to.to_string(),
            condition: None,
            conclusion: None,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.condition.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionDag {
    pub tsg_id: String,
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
}

pub fn step_node_id(step: &StepId) -> String {
    format!("step{step}")
}

pub fn edge_id(from: &str, to: &str) -> String {
    format!("edge_{from}_{to}")
}

/// Canonical node ordering: start, steps by numeric id, end, then anything else.
pub fn cmp_node_ids(a: &str, b: &str) -> Ordering {
    node_rank(a).cmp(&node_rank(b)).then_with(|| a.cmp(b))
}

fn node_rank(id: &str) -> (u8, Option<StepId>) {
    match id {
        START => (0, None),
        END => (2, None),
        _ => match id.strip_prefix("step").and_then(StepId::parse) {
            Some(step) => (1, Some(step)),
            None => (3, None),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("guide has unresolved diagnostics (first at line {line}: {message})")]
    InvalidDocument { line: usize, message: String },
    #[error("directives form a cycle through {}", nodes.join(", "))]
    CycleDetected { nodes: Vec<String> },
    #[error("node {0} is unreachable from start")]
    Unreachable(String),
    #[error("node {0} has no outgoing transition and no termination")]
    DeadEnd(String),
    #[error("duplicate edge {0}; merge the arms into one unconditional transition")]
    DuplicateEdge(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
}

/// Builds the execution DAG of a parsed guide.
pub fn extract_dag(doc: &TsgDocument) -> Result<ExecutionDag, DagError> {
    if let Some(d) = doc.diagnostics.first() {
        return Err(DagError::InvalidDocument {
            line: d.line,
            message: d.message.clone(),
        });
    }
    let mut nodes = vec![DagNode {
        id: START.into(),
        kind: NodeKind::Start,
        description: "Start".into(),
        step_ref: None,
    }];
    for step in &doc.steps {
        nodes.push(DagNode {
            id: step_node_id(&step.id),
            kind: NodeKind::Step,
            description: step.title.clone(),
            step_ref: Some(step.id.to_string()),
        });
    }
    nodes.push(DagNode {
        id: END.into(),
        kind: NodeKind::End,
        description: "End".into(),
        step_ref: None,
    });

    let mut edges: Vec<DagEdge> = vec![DagEdge::new(START, &step_node_id(doc.entry_step()))];
    let mut push = |edge: DagEdge| -> Result<(), DagError> {
        if edges.iter().any(|e| e.id == edge.id) {
            return Err(DagError::DuplicateEdge(edge.id));
        }
        edges.push(edge);
        Ok(())
    };
    for step in &doc.steps {
        let from = step_node_id(&step.id);
        for d in &step.next_directives {
            match d.kind {
                DirectiveKind::Unconditional | DirectiveKind::Parallel => {
                    for t in &d.targets {
                        push(DagEdge::new(&from, &step_node_id(t)))?;
                    }
                }
                DirectiveKind::Conditional => {
                    let to = match d.targets.first() {
                        Some(t) => step_node_id(t),
                        None => END.to_string(),
                    };
                    let mut e = DagEdge::new(&from, &to);
                    e.condition = d.condition.clone();
                    e.conclusion = d.conclusion.clone();
                    push(e)?;
                }
                DirectiveKind::Terminate => {
                    let mut e = DagEdge::new(&from, END);
                    e.conclusion = d.conclusion.clone();
                    push(e)?;
                }
            }
        }
        if let Some(c) = &step.terminal_conclusion {
            let mut e = DagEdge::new(&from, END);
            e.conclusion = Some(c.clone());
            push(e)?;
        }
    }

    let mut dag = ExecutionDag {
        tsg_id: doc.tsg_id.clone(),
        nodes,
        edges,
    };
    dag.canonicalize();

    let report = validate_dag(&dag);
    let mut first: Option<(u8, DagError)> = None;
    for v in report.violations {
        let ranked = match v {
            Violation::Cycle { nodes, .. } => (0, DagError::CycleDetected { nodes }),
            Violation::DeadEnd { node } => (1, DagError::DeadEnd(node)),
            Violation::Unreachable { node } => (2, DagError::Unreachable(node)),
            _ => continue,
        };
        if first.as_ref().is_none_or(|(r, _)| ranked.0 < *r) {
            first = Some(ranked);
        }
    }
    match first {
        Some((_, e)) => Err(e),
        None => Ok(dag),
    }
}

impl ExecutionDag {
    /// Sorts nodes and edges into canonical order.
    pub fn canonicalize(&mut self) {
        self.nodes.sort_by(|a, b| cmp_node_ids(&a.id, &b.id));
        self.edges.sort_by(|a, b| {
            cmp_node_ids(&a.from, &b.from)
                .then_with(|| cmp_node_ids(&a.to, &b.to))
                .then_with(|| a.id.cmp(&b.id))
        });
    }

    pub fn node(&self, id: &str) -> Option<&DagNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&DagEdge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn outgoing<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a DagEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn incoming<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a DagEdge> + 'a {
        self.edges.iter().filter(move |e| e.to == node)
    }

    pub fn step_nodes(&self) -> impl Iterator<Item = &DagNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    MissingStart,
    MultipleStart { nodes: Vec<String> },
    MissingEnd,
    MultipleEnd { nodes: Vec<String> },
    DuplicateNode { node: String },
    DuplicateEdgeId { edge: String },
    DanglingEdge { edge: String, endpoint: String },
    MalformedEdgeId { edge: String, expected: String },
    Cycle { nodes: Vec<String>, edges: Vec<String> },
    Unreachable { node: String },
    DeadEnd { node: String },
    IncompleteCondition { edge: String },
    ConclusionOnNonEndEdge { edge: String },
    StepWithoutReference { node: String },
    EdgeIntoStart { edge: String },
    EdgeOutOfEnd { edge: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of an execution DAG.
pub fn validate_dag(dag: &ExecutionDag) -> ValidationReport {
    let mut v = Vec::new();
    let kinds = |k: NodeKind| -> Vec<String> {
        dag.nodes
            .iter()
            .filter(|n| n.kind == k)
            .map(|n| n.id.clone())
            .collect()
    };
    let starts = kinds(NodeKind::Start);
    let ends = kinds(NodeKind::End);
    match starts.len() {
        0 => v.push(Violation::MissingStart),
        1 => {}
        _ => v.push(Violation::MultipleStart { nodes: starts.clone() }),
    }
    match ends.len() {
        0 => v.push(Violation::MissingEnd),
        1 => {}
        _ => v.push(Violation::MultipleEnd { nodes: ends.clone() }),
    }

    let mut ids = BTreeSet::new();
    for n in &dag.nodes {
        if !ids.insert(n.id.as_str()) {
            v.push(Violation::DuplicateNode { node: n.id.clone() });
        }
        if n.kind == NodeKind::Step && n.step_ref.as_deref().is_none_or(str::is_empty) {
            v.push(Violation::StepWithoutReference { node: n.id.clone() });
        }
    }
    let kind_of: HashMap<&str, NodeKind> =
        dag.nodes.iter().map(|n| (n.id.as_str(), n.kind)).collect();

    let mut edge_ids = BTreeSet::new();
    for e in &dag.edges {
        if !edge_ids.insert(e.id.as_str()) {
            v.push(Violation::DuplicateEdgeId { edge: e.id.clone() });
        }
        let expected = edge_id(&e.from, &e.to);
        if e.id != expected {
            v.push(Violation::MalformedEdgeId {
                edge: e.id.clone(),
                expected,
            });
        }
        for endpoint in [&e.from, &e.to] {
            if !kind_of.contains_key(endpoint.as_str()) {
                v.push(Violation::DanglingEdge {
                    edge: e.id.clone(),
                    endpoint: endpoint.clone(),
                });
            }
        }
        if let Some(c) = &e.condition {
            if c.question.trim().is_empty() {
                v.push(Violation::IncompleteCondition { edge: e.id.clone() });
            }
        }
        let to_kind = kind_of.get(e.to.as_str()).copied();
        if e.conclusion.is_some() && to_kind != Some(NodeKind::End) {
            v.push(Violation::ConclusionOnNonEndEdge { edge: e.id.clone() });
        }
        if to_kind == Some(NodeKind::Start) {
            v.push(Violation::EdgeIntoStart { edge: e.id.clone() });
        }
        if kind_of.get(e.from.as_str()) == Some(&NodeKind::End) {
            v.push(Violation::EdgeOutOfEnd { edge: e.id.clone() });
        }
    }

    let valid_edges: Vec<&DagEdge> = dag
        .edges
        .iter()
        .filter(|e| kind_of.contains_key(e.from.as_str()) && kind_of.contains_key(e.to.as_str()))
        .collect();
    for (nodes, edges) in cycles(&dag.nodes, &valid_edges) {
        v.push(Violation::Cycle { nodes, edges });
    }

    if let [start] = starts.as_slice() {
        let mut seen = BTreeSet::from([start.as_str()]);
        let mut queue = VecDeque::from([start.as_str()]);
        while let Some(n) = queue.pop_front() {
            for e in valid_edges.iter().filter(|e| e.from == n) {
                if seen.insert(e.to.as_str()) {
                    queue.push_back(e.to.as_str());
                }
            }
        }
        for n in &dag.nodes {
            if !seen.contains(n.id.as_str()) {
                v.push(Violation::Unreachable { node: n.id.clone() });
            }
        }
    }
    for n in &dag.nodes {
        if n.kind != NodeKind::End && !valid_edges.iter().any(|e| e.from == n.id) {
            v.push(Violation::DeadEnd { node: n.id.clone() });
        }
    }
    ValidationReport { violations: v }
}

/// Strongly connected components that contain a cycle (Tarjan).
fn cycles(nodes: &[DagNode], edges: &[&DagEdge]) -> Vec<(Vec<String>, Vec<String>)> {
    let index_of: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    for e in edges {
        adj[index_of[e.from.as_str()]].push(index_of[e.to.as_str()]);
    }

    struct Tarjan<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        comps: Vec<Vec<usize>>,
    }
    impl Tarjan<'_> {
        fn visit(&mut self, v: usize) {
            self.index[v] = Some(self.next);
            self.low[v] = self.next;
            self.next += 1;
            self.stack.push(v);
            self.on_stack[v] = true;
            for i in 0..self.adj[v].len() {
                let w = self.adj[v][i];
                match self.index[w] {
                    None => {
                        self.visit(w);
                        self.low[v] = self.low[v].min(self.low[w]);
                    }
                    Some(iw) if self.on_stack[w] => self.low[v] = self.low[v].min(iw),
                    _ => {}
                }
            }
            if Some(self.low[v]) == self.index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = self.stack.pop().unwrap();
                    self.on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                self.comps.push(comp);
            }
        }
    }

    let n = nodes.len();
    let mut t = Tarjan {
        adj: &adj,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        comps: Vec::new(),
    };
    for v in 0..n {
        if t.index[v].is_none() {
            t.visit(v);
        }
    }
    let mut out = Vec::new();
    for comp in t.comps {
        let members: BTreeSet<usize> = comp.iter().copied().collect();
        let self_loop = comp.len() == 1 && adj[comp[0]].contains(&comp[0]);
        if comp.len() < 2 && !self_loop {
            continue;
        }
        let mut names: Vec<String> = members.iter().map(|&i| nodes[i].id.clone()).collect();
        names.sort_by(|a, b| cmp_node_ids(a, b));
        let mut es: Vec<String> = edges
            .iter()
            .filter(|e| {
                members.contains(&index_of[e.from.as_str()])
                    && members.contains(&index_of[e.to.as_str()])
            })
            .map(|e| e.id.clone())
            .collect();
        es.sort();
        out.push((names, es));
    }
    out
}

/// Serializes in canonical order; output is byte-stable.
pub fn serialize_dag(dag: &ExecutionDag) -> String {
    let mut dag = dag.clone();
    dag.canonicalize();
    let mut text = serde_json::to_string_pretty(&dag).expect("dag serializes");
    text.push('\n');
    text
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> DagError {
    DagError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

fn get_str<'a>(obj: &'a Value, field: &str, path: &str) -> Result<&'a str, DagError> {
    obj.get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| violation(format!("{path}/{field}"), "expected a string"))
}

fn get_opt_str(obj: &Value, field: &str, path: &str) -> Result<Option<String>, DagError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(violation(format!("{path}/{field}"), "expected a string or null")),
    }
}

/// Loads a DAG file, reporting the JSON path of the first schema problem.
pub fn load_dag(text: &str) -> Result<ExecutionDag, DagError> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| violation("", format!("invalid JSON: {e}")))?;
    if !root.is_object() {
        return Err(violation("", "expected an object"));
    }
    let raw_nodes = root
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| violation("/nodes", "expected an array"))?;
    if raw_nodes.is_empty() {
        return Err(violation("/nodes", "at least the start and end nodes are required"));
    }
    let mut nodes = Vec::with_capacity(raw_nodes.len());
    for (i, n) in raw_nodes.iter().enumerate() {
        let path = format!("/nodes/{i}");
        let kind = match get_str(n, "kind", &path)? {
            "start" => NodeKind::Start,
            "step" => NodeKind::Step,
            "end" => NodeKind::End,
            other => {
                return Err(violation(
                    format!("{path}/kind"),
                    format!("unknown kind `{other}`"),
                ))
            }
        };
        nodes.push(DagNode {
            id: get_str(n, "id", &path)?.to_string(),
            kind,
            description: get_str(n, "description", &path)?.to_string(),
            step_ref: get_opt_str(n, "step_ref", &path)?,
        });
    }
    let raw_edges = root
        .get("edges")
        .and_then(Value::as_array)
        .ok_or_else(|| violation("/edges", "expected an array"))?;
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (i, e) in raw_edges.iter().enumerate() {
        let path = format!("/edges/{i}");
        let condition = match e.get("condition") {
            None | Some(Value::Null) => None,
            Some(c) if c.is_object() => {
                let cpath = format!("{path}/condition");
                let label = match get_str(c, "label", &cpath)? {
                    "Y" => Label::Y,
                    "N" => Label::N,
                    other => {
                        return Err(violation(
                            format!("{cpath}/label"),
                            format!("label must be Y or N, found `{other}`"),
                        ))
                    }
                };
                Some(Condition {
                    question: get_str(c, "question", &cpath)?.to_string(),
                    label,
                })
            }
            Some(_) => return Err(violation(format!("{path}/condition"), "expected an object or null")),
        };
        edges.push(DagEdge {
            id: get_str(e, "id", &path)?.to_string(),
            from: get_str(e, "from", &path)?.to_string(),
            to: get_str(e, "to", &path)?.to_string(),
            condition,
            conclusion: get_opt_str(e, "conclusion", &path)?,
        });
    }
    let tsg_id = get_str(&root, "tsg_id", "")?.to_string();
    let mut dag = ExecutionDag {
        tsg_id,
        nodes,
        edges,
    };
    dag.canonicalize();
    Ok(dag)
}

/// Adjacency view of a DAG used by the scheduler.
#[derive(Debug, Clone)]
pub struct DagIndex {
    pub dag: ExecutionDag,
    pub topo: Vec<String>,
    incoming: BTreeMap<String, Vec<usize>>,
    outgoing: BTreeMap<String, Vec<usize>>,
}

impl DagIndex {
    /// Builds the index; the DAG must validate.
    pub fn new(dag: &ExecutionDag) -> Result<DagIndex, ValidationReport> {
        let report = validate_dag(dag);
        if !report.is_valid() {
            return Err(report);
        }
        let mut dag = dag.clone();
        dag.canonicalize();
        let mut incoming: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut outgoing: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for n in &dag.nodes {
            incoming.insert(n.id.clone(), Vec::new());
            outgoing.insert(n.id.clone(), Vec::new());
        }
        for (i, e) in dag.edges.iter().enumerate() {
            outgoing.get_mut(&e.from).unwrap().push(i);
            incoming.get_mut(&e.to).unwrap().push(i);
        }
        // Kahn with a canonical tie-break.
        let mut indeg: BTreeMap<&str, usize> = incoming
            .iter()
            .map(|(k, v)| (k.as_str(), v.len()))
            .collect();
        let mut ready: Vec<&str> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut topo = Vec::new();
        while !ready.is_empty() {
            ready.sort_by(|a, b| cmp_node_ids(b, a));
            let n = ready.pop().unwrap();
            topo.push(n.to_string());
            for &ei in &outgoing[n] {
                let to = dag.edges[ei].to.as_str();
                let d = indeg.get_mut(to).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(to);
                }
            }
        }
        Ok(DagIndex {
            topo,
            incoming,
            outgoing,
            dag,
        })
    }

    pub fn incoming(&self, node: &str) -> impl Iterator<Item = &DagEdge> {
        self.incoming
            .get(node)
            .into_iter()
            .flatten()
            .map(|&i| &self.dag.edges[i])
    }

    pub fn outgoing(&self, node: &str) -> impl Iterator<Item = &DagEdge> {
        self.outgoing
            .get(node)
            .into_iter()
            .flatten()
            .map(|&i| &self.dag.edges[i])
    }

    pub fn contains(&self, node: &str) -> bool {
        self.incoming.contains_key(node)
    }

    pub fn kind(&self, node: &str) -> Option<NodeKind> {
        self.dag.node(node).map(|n| n.kind)
    }
}
