use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::trace::{detail, EventKind, Trace};
use crate::dag::{cmp_node_ids, DagIndex, NodeKind, ValidationReport, START};
use crate::memory::MemoryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementState {
    Unknown,
    Enabled,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Concluded(String),
    Exhausted,
    Failed(String),
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Concluded(_) => "concluded",
            RunStatus::Exhausted => "exhausted",
            RunStatus::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResult {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeDecision {
    Enable,
    Disable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub result: StepResult,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub edge_decisions: BTreeMap<String, EdgeDecision>,
    #[serde(default)]
    pub memory_writes: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub duration: f64,
}

impl StepOutcome {
    pub fn success(summary: impl Into<String>, decisions: impl IntoIterator<Item = (String, EdgeDecision)>) -> Self {
        StepOutcome {
            result: StepResult::Success,
            summary: summary.into(),
            edge_decisions: decisions.into_iter().collect(),
            memory_writes: Vec::new(),
            error: None,
            duration: 0.0,
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        let error = error.into();
        StepOutcome {
            result: StepResult::Failure,
            summary: String::new(),
            edge_decisions: BTreeMap::new(),
            memory_writes: Vec::new(),
            error: Some(error),
            duration: 0.0,
        }
    }

    pub fn with_duration(mut self, d: f64) -> Self {
        self.duration = d;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub node: String,
    pub attempt: u32,
    pub result: StepResult,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("outcome for {node} leaves edges undecided: {}", missing.join(", "))]
    IncompleteEdgeDecisions { node: String, missing: Vec<String> },
    #[error("invalid decision for {edge} of {node}: {message}")]
    InvalidEdgeDecision { node: String, edge: String, message: String },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("outcome for {0}, which is not running")]
    StaleOutcome(String),
    #[error("dag is invalid: {0:?}")]
    DagInvalid(ValidationReport),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("scenario has no attempts for {0}")]
    ScenarioIncomplete(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq)]
struct Queued {
    at: f64,
    node: String,
}

fn cmp_queued(a: &Queued, b: &Queued) -> Ordering {
    a.at.total_cmp(&b.at).then_with(|| cmp_node_ids(&a.node, &b.node))
}

/// Tri-state run bookkeeping. Every transition appends exactly one trace
/// event stamped with the current `clock`.
#[derive(Debug, Clone)]
pub struct RunState {
    pub node_state: BTreeMap<String, ElementState>,
    pub edge_state: BTreeMap<String, ElementState>,
    pub attempts: BTreeMap<String, u32>,
    pub running: BTreeMap<String, f64>,
    pub failed: BTreeSet<String>,
    pub completed: BTreeSet<String>,
    pub cancelled: BTreeSet<String>,
    pub history: Vec<HistoryEntry>,
    pub clock: f64,
    pub status: RunStatus,
    pub retry_limit: u32,
    queue: Vec<Queued>,
    trace: Trace,
}

impl RunState {
    /// Fresh state with every element unknown.
    pub fn new(index: &DagIndex, retry_limit: u32) -> Self {
        RunState {
            node_state: index.dag.nodes.iter().map(|n| (n.id.clone(), ElementState::Unknown)).collect(),
            edge_state: index.dag.edges.iter().map(|e| (e.id.clone(), ElementState::Unknown)).collect(),
            attempts: BTreeMap::new(),
            running: BTreeMap::new(),
            failed: BTreeSet::new(),
            completed: BTreeSet::new(),
            cancelled: BTreeSet::new(),
            history: Vec::new(),
            clock: 0.0,
            status: RunStatus::Running,
            retry_limit,
            queue: Vec::new(),
            trace: Trace::new(),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn emit(&mut self, kind: EventKind, subject: &str, d: serde_json::Map<String, Value>) {
        self.trace.push(self.clock, kind, subject, d);
    }

    /// Ready queue in dispatch order.
    pub fn ready_queue(&self) -> Vec<String> {
        let mut q = self.queue.clone();
        q.sort_by(cmp_queued);
        q.into_iter().map(|q| q.node).collect()
    }

    /// Emits `run_started`, resolves the start node and its outgoing edges,
    /// then propagates.
    pub fn start(&mut self, index: &DagIndex, run_id: &str) {
        self.emit(
            EventKind::RunStarted,
            run_id,
            detail([("tsg_id", json!(index.dag.tsg_id)), ("retry_limit", json!(self.retry_limit))]),
        );
        self.set_node(START, ElementState::Enabled, EventKind::NodeEnabled);
        let out: Vec<String> = index.outgoing(START).map(|e| e.id.clone()).collect();
        for e in out {
            self.set_edge(&e, ElementState::Enabled);
        }
        self.propagate(index);
    }

    fn set_node(&mut self, node: &str, s: ElementState, kind: EventKind) {
        let slot = self.node_state.get_mut(node).expect("known node");
        debug_assert_eq!(*slot, ElementState::Unknown);
        *slot = s;
        self.emit(kind, node, serde_json::Map::new());
    }

    fn set_edge(&mut self, edge: &str, s: ElementState) {
        let slot = self.edge_state.get_mut(edge).expect("known edge");
        if *slot != ElementState::Unknown {
            return;
        }
        *slot = s;
        let kind = if s == ElementState::Enabled {
            EventKind::EdgeEnabled
        } else {
            EventKind::EdgeDisabled
        };
        self.emit(kind, edge, serde_json::Map::new());
    }

    /// Next node in FIFO order (ties by ascending node id).
    pub fn pop_ready(&mut self) -> Option<String> {
        let (i, _) = self.queue.iter().enumerate().min_by(|a, b| cmp_queued(a.1, b.1))?;
        Some(self.queue.remove(i).node)
    }

    /// Records a dispatch and returns the attempt number (1-based).
    pub fn mark_started(&mut self, node: &str) -> u32 {
        let n = self.attempts.entry(node.to_string()).or_insert(0);
        *n += 1;
        let attempt = *n;
        self.running.insert(node.to_string(), self.clock);
        self.emit(EventKind::NodeStarted, node, detail([("attempt", json!(attempt))]));
        attempt
    }

    /// Checks an outcome against the node's outgoing edges without mutating state.
    pub fn validate_outcome(&self, index: &DagIndex, node: &str, outcome: &StepOutcome) -> Result<(), EngineError> {
        if !index.contains(node) {
            return Err(EngineError::UnknownNode(node.to_string()));
        }
        if !self.running.contains_key(node) {
            return Err(EngineError::StaleOutcome(node.to_string()));
        }
        if outcome.result == StepResult::Failure {
            return Ok(());
        }
        for edge_id in outcome.edge_decisions.keys() {
            if !index.outgoing(node).any(|e| &e.id == edge_id) {
                return Err(EngineError::InvalidEdgeDecision {
                    node: node.to_string(),
                    edge: edge_id.clone(),
                    message: "not an outgoing edge of this node".into(),
                });
            }
        }
        let mut missing = Vec::new();
        for e in index.outgoing(node) {
            match outcome.edge_decisions.get(&e.id) {
                None => missing.push(e.id.clone()),
                Some(EdgeDecision::Disable) if !e.is_conditional() => {
                    return Err(EngineError::InvalidEdgeDecision {
                        node: node.to_string(),
                        edge: e.id.clone(),
                        message: "unconditional edges must be enabled".into(),
                    })
                }
                Some(_) => {}
            }
        }
        if !missing.is_empty() {
            return Err(EngineError::IncompleteEdgeDecisions {
                node: node.to_string(),
                missing,
            });
        }
        Ok(())
    }

    /// Applies a completed step: edge decisions or retry/failure handling,
    /// then the propagation closure and, if the end node is reached,
    /// conclusion with cancellation of everything still running or queued.
    pub fn apply_outcome(&mut self, index: &DagIndex, node: &str, outcome: &StepOutcome) -> Result<(), EngineError> {
        self.validate_outcome(index, node, outcome)?;
        self.running.remove(node);
        let attempt = self.attempts.get(node).copied().unwrap_or(0);
        match outcome.result {
            StepResult::Success => {
                let enabled: Vec<&String> = outcome
                    .edge_decisions
                    .iter()
                    .filter(|(_, d)| **d == EdgeDecision::Enable)
                    .map(|(e, _)| e)
                    .collect();
                self.emit(
                    EventKind::NodeSucceeded,
                    node,
                    detail([
                        ("attempt", json!(attempt)),
                        ("duration", json!(outcome.duration)),
                        ("enabled_edges", json!(enabled)),
                        ("summary", json!(outcome.summary)),
                    ]),
                );
                self.completed.insert(node.to_string());
                self.history.push(HistoryEntry {
                    node: node.to_string(),
                    attempt,
                    result: StepResult::Success,
                    text: outcome.summary.clone(),
                });
                let edges: Vec<String> = index.outgoing(node).map(|e| e.id.clone()).collect();
                for e in edges {
                    let s = match outcome.edge_decisions[&e] {
                        EdgeDecision::Enable => ElementState::Enabled,
                        EdgeDecision::Disable => ElementState::Disabled,
                    };
                    self.set_edge(&e, s);
                }
            }
            StepResult::Failure => {
                let error = outcome.error.clone().unwrap_or_else(|| "step failed".into());
                let retry = attempt <= self.retry_limit;
                self.emit(
                    EventKind::NodeFailed,
                    node,
                    detail([
                        ("attempt", json!(attempt)),
                        ("duration", json!(outcome.duration)),
                        ("error", json!(error)),
                        ("final", json!(!retry)),
                    ]),
                );
                self.history.push(HistoryEntry {
                    node: node.to_string(),
                    attempt,
                    result: StepResult::Failure,
                    text: error,
                });
                if retry {
                    self.emit(EventKind::NodeRetried, node, detail([("next_attempt", json!(attempt + 1))]));
                    self.queue.push(Queued {
                        at: self.clock,
                        node: node.to_string(),
                    });
                    return Ok(());
                }
                self.failed.insert(node.to_string());
                self.completed.insert(node.to_string());
                let edges: Vec<String> = index.outgoing(node).map(|e| e.id.clone()).collect();
                for e in edges {
                    self.set_edge(&e, ElementState::Disabled);
                }
            }
        }
        self.propagate(index);
        Ok(())
    }

    /// One pass in topological order resolves every node whose incoming
    /// edges allow it.
    fn propagate(&mut self, index: &DagIndex) {
        let mut newly_ready = Vec::new();
        let mut conclusion = None;
        for node in &index.topo {
            if self.node_state[node] != ElementState::Unknown {
                continue;
            }
            let states: Vec<ElementState> = index.incoming(node).map(|e| self.edge_state[&e.id]).collect();
            let any_enabled = states.contains(&ElementState::Enabled);
            let all_resolved = !states.contains(&ElementState::Unknown);
            match index.kind(node) {
                Some(NodeKind::End) => {
                    if any_enabled {
                        let edge = index
                            .incoming(node)
                            .find(|e| self.edge_state[&e.id] == ElementState::Enabled)
                            .expect("an enabled edge");
                        let text = edge.conclusion.clone().unwrap_or_default();
                        let via = edge.id.clone();
                        self.node_state.insert(node.clone(), ElementState::Enabled);
                        self.emit(
                            EventKind::NodeEnabled,
                            node,
                            detail([("conclusion", json!(text)), ("via", json!(via))]),
                        );
                        conclusion = Some(text);
                    } else if all_resolved && !states.is_empty() {
                        self.set_node(node, ElementState::Disabled, EventKind::NodeDisabled);
                    }
                }
                _ => {
                    if all_resolved && any_enabled {
                        self.set_node(node, ElementState::Enabled, EventKind::NodeEnabled);
                        newly_ready.push(node.clone());
                    } else if all_resolved && !states.is_empty() {
                        self.set_node(node, ElementState::Disabled, EventKind::NodeDisabled);
                        let out: Vec<String> = index.outgoing(node).map(|e| e.id.clone()).collect();
                        for e in out {
                            self.set_edge(&e, ElementState::Disabled);
                        }
                    }
                }
            }
        }
        newly_ready.sort_by(|a, b| cmp_node_ids(a, b));
        for node in newly_ready {
            self.queue.push(Queued { at: self.clock, node });
        }
        if let Some(c) = conclusion {
            self.conclude(c);
        }
    }

    fn conclude(&mut self, conclusion: String) {
        self.status = RunStatus::Concluded(conclusion);
        let mut running: Vec<String> = self.running.keys().cloned().collect();
        running.sort_by(|a, b| cmp_node_ids(a, b));
        for node in running {
            self.running.remove(&node);
            self.cancelled.insert(node.clone());
            self.emit(EventKind::NodeCancelled, &node, detail([("phase", json!("running"))]));
        }
        for node in self.ready_queue() {
            self.cancelled.insert(node.clone());
            self.emit(EventKind::NodeCancelled, &node, detail([("phase", json!("queued"))]));
        }
        self.queue.clear();
    }

    /// Stops a run whose backend became unusable.
    pub fn fail(&mut self, reason: String) {
        self.conclude(String::new());
        self.status = RunStatus::Failed(reason);
    }

    /// Marks the run exhausted when nothing is queued or running.
    pub fn check_exhausted(&mut self) -> bool {
        if self.status == RunStatus::Running && self.queue.is_empty() && self.running.is_empty() {
            self.status = RunStatus::Exhausted;
            return true;
        }
        false
    }

    /// Step nodes that resolved to disabled.
    pub fn disabled_nodes(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .node_state
            .iter()
            .filter(|(_, s)| **s == ElementState::Disabled)
            .map(|(n, _)| n.clone())
            .collect();
        v.sort_by(|a, b| cmp_node_ids(a, b));
        v
    }

    /// Emits the final `run_terminated` event.
    pub fn terminate(&mut self) {
        let mut d = detail([
            ("status", json!(self.status.name())),
            ("failed", json!(sorted(&self.failed))),
            ("disabled", json!(self.disabled_nodes())),
        ]);
        match &self.status {
            RunStatus::Concluded(c) => {
                d.insert("conclusion".into(), json!(c));
            }
            RunStatus::Failed(r) => {
                d.insert("reason".into(), json!(r));
            }
            _ => {}
        }
        self.emit(EventKind::RunTerminated, "run", d);
    }
}

pub(crate) fn sorted(set: &BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = set.iter().cloned().collect();
    v.sort_by(|a, b| cmp_node_ids(a, b));
    v
}
