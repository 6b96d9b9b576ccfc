//! Bundles on disk, executor-count sweeps and an independent makespan oracle.
//!
//! A bundle directory holds `tsg.md`, optionally `dag.json` and `qpp.json`
//! (re-derived from the guide when absent), `fixtures/` for the mock
//! plugins, `scenarios/*.json`, and optionally `baseline/tsg.md`, the
//! sequential form of the same guide.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{extract_dag, load_dag, DagError, ExecutionDag, NodeKind};
use crate::engine::{run_scripted, EngineError, RunBundle, RunConfig, RunEnv, RunReport, Scenario, ScenarioError};
use crate::memory::InMemoryStore;
use crate::plugins::{FixtureSet, PluginError, PluginRegistry};
use crate::qpp::{extract_templates, QppError, QppManifest, QueryTemplate};
use crate::tsg::{parse_tsg, ParseError, TsgDocument};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Dag(#[from] DagError),
    #[error("{0}")]
    Qpp(#[from] QppError),
    #[error("{0}")]
    Plugin(#[from] PluginError),
    #[error("{0}")]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error("scenario does not resolve {0}")]
    ScenarioIncomplete(String),
    #[error("executor counts must be non-empty and at least 1")]
    InvalidExecutors,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// A guide with its DAG and templates.
#[derive(Debug, Clone)]
pub struct Guide {
    pub doc: TsgDocument,
    pub dag: ExecutionDag,
    pub templates: Vec<QueryTemplate>,
}

impl Guide {
    pub fn from_markdown(text: &str) -> Result<Guide, HarnessError> {
        let doc = parse_tsg(text)?;
        let dag = extract_dag(&doc)?;
        let templates = extract_templates(&doc)?;
        Ok(Guide { doc, dag, templates })
    }

    pub fn run_bundle(&self) -> RunBundle {
        RunBundle {
            doc: Some(self.doc.clone()),
            dag: self.dag.clone(),
            templates: self.templates.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub guide: Guide,
    pub fixtures: Arc<FixtureSet>,
    pub baseline: Option<Guide>,
}

impl Bundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Bundle, HarnessError> {
        let dir = dir.as_ref().to_path_buf();
        let doc = parse_tsg(&read(&dir.join("tsg.md"))?)?;
        let dag_path = dir.join("dag.json");
        let dag = if dag_path.exists() {
            load_dag(&read(&dag_path)?)?
        } else {
            extract_dag(&doc)?
        };
        let qpp_path = dir.join("qpp.json");
        let templates = if qpp_path.exists() {
            QppManifest::from_json(&read(&qpp_path)?)?.templates()
        } else {
            extract_templates(&doc)?
        };
        let fixtures = Arc::new(FixtureSet::load(&dir.join("fixtures"))?);
        let baseline_path = dir.join("baseline").join("tsg.md");
        let baseline = if baseline_path.exists() {
            Some(Guide::from_markdown(&read(&baseline_path)?)?)
        } else {
            None
        };
        Ok(Bundle {
            dir,
            guide: Guide { doc, dag, templates },
            fixtures,
            baseline,
        })
    }

    pub fn tsg_id(&self) -> &str {
        &self.guide.dag.tsg_id
    }

    /// Scenario files in name order.
    pub fn scenario_paths(&self) -> Result<Vec<PathBuf>, HarnessError> {
        let dir = self.dir.join("scenarios");
        let entries = std::fs::read_dir(&dir).map_err(|e| HarnessError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut out: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn scenario(&self, name: &str) -> Result<Scenario, HarnessError> {
        Ok(Scenario::load(&self.dir.join("scenarios").join(format!("{name}.json")))?)
    }

    /// Fresh plugins and memory for one run of `guide`.
    pub fn env_for(&self, guide: &Guide) -> Result<RunEnv, HarnessError> {
        Ok(RunEnv {
            plugins: PluginRegistry::standard(self.fixtures.clone(), &guide.templates)?,
            memory: Arc::new(InMemoryStore::new()),
        })
    }

    pub fn run(&self, scenario: &Scenario, config: &RunConfig) -> Result<RunReport, HarnessError> {
        let env = self.env_for(&self.guide)?;
        Ok(run_scripted(&self.guide.run_bundle(), scenario, config, &env)?)
    }

    pub fn run_baseline(&self, scenario: &Scenario, config: &RunConfig) -> Option<Result<RunReport, HarnessError>> {
        let guide = self.baseline.as_ref()?;
        Some(
            self.env_for(guide)
                .and_then(|env| Ok(run_scripted(&guide.run_bundle(), scenario, config, &env)?)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Earliest time a conclusion edge can enable with unbounded executors;
    /// the unbounded makespan when no conclusion is reachable.
    pub critical_path: f64,
    /// Makespan of a single executor taking ready steps in FIFO order.
    pub serial_sum: f64,
    /// Maximum antichain among the steps that start before the run ends.
    pub width: usize,
    pub conclusion: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Resolved {
    On(f64),
    Off(f64),
}

impl Resolved {
    fn time(self) -> f64 {
        match self {
            Resolved::On(t) | Resolved::Off(t) => t,
        }
    }

    fn on(self) -> bool {
        matches!(self, Resolved::On(_))
    }
}

/// Realized behaviour of one step under a scenario.
struct Realized {
    /// Latency of each attempt that is actually made.
    attempts: Vec<f64>,
    /// Outgoing edge id -> enabled, or `None` when the step finally fails.
    decisions: Option<BTreeMap<String, bool>>,
}

fn realize(dag: &ExecutionDag, scenario: &Scenario, node: &str, retry_limit: u32) -> Result<Realized, HarnessError> {
    let incomplete = || HarnessError::ScenarioIncomplete(node.to_string());
    let script = scenario.steps.get(node).filter(|s| !s.attempts.is_empty()).ok_or_else(incomplete)?;
    let mut attempts = Vec::new();
    for n in 0..=retry_limit as usize {
        let a = &script.attempts[n.min(script.attempts.len() - 1)];
        attempts.push(a.latency.max(0.0));
        if a.result != crate::engine::StepResult::Success {
            continue;
        }
        let mut decisions = BTreeMap::new();
        for e in dag.edges.iter().filter(|e| e.from == node) {
            let on = match (a.edge_decisions.get(&e.id), &e.condition, a.answer) {
                (Some(d), _, _) => *d == crate::engine::EdgeDecision::Enable,
                (None, None, _) => true,
                (None, Some(c), Some(ans)) => c.label == ans,
                (None, Some(_), None) => return Err(HarnessError::ScenarioIncomplete(e.id.clone())),
            };
            decisions.insert(e.id.clone(), on);
        }
        return Ok(Realized {
            attempts,
            decisions: Some(decisions),
        });
    }
    Ok(Realized {
        attempts,
        decisions: None,
    })
}

fn topo_order(dag: &ExecutionDag) -> Vec<String> {
    let mut indeg: BTreeMap<&str, usize> = dag.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
    for e in &dag.edges {
        *indeg.get_mut(e.to.as_str()).unwrap() += 1;
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut out = Vec::new();
    while let Some(n) = ready.pop() {
        out.push(n.to_string());
        for e in dag.edges.iter().filter(|e| e.from == n) {
            let d = indeg.get_mut(e.to.as_str()).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(&e.to);
            }
        }
    }
    out
}

/// Bounds for a scenario computed without the engine: the unbounded
/// schedule (earliest conclusion), a one-executor FIFO simulation and the
/// width of the realized subgraph.
pub fn oracle_makespan(dag: &ExecutionDag, scenario: &Scenario, retry_limit: u32) -> Result<OracleReport, HarnessError> {
    let kind: BTreeMap<&str, NodeKind> = dag.nodes.iter().map(|n| (n.id.as_str(), n.kind)).collect();
    let mut realized = BTreeMap::new();
    for n in dag.nodes.iter().filter(|n| n.kind == NodeKind::Step) {
        realized.insert(n.id.clone(), realize(dag, scenario, &n.id, retry_limit)?);
    }

    // Unbounded executors: every enabled step starts the moment its last
    // incoming edge resolves.
    let mut edge: BTreeMap<String, Resolved> = BTreeMap::new();
    let mut start_at: BTreeMap<String, f64> = BTreeMap::new();
    let mut conclusion: Option<(f64, String)> = None;
    let mut last_finish: f64 = 0.0;
    for node in topo_order(dag) {
        let incoming: Vec<Resolved> = dag.edges.iter().filter(|e| e.to == node).map(|e| edge[&e.id]).collect();
        match kind[node.as_str()] {
            NodeKind::Start => {
                for e in dag.edges.iter().filter(|e| e.from == node) {
                    edge.insert(e.id.clone(), Resolved::On(0.0));
                }
            }
            NodeKind::End => {
                for e in dag.edges.iter().filter(|e| e.to == node) {
                    if let Resolved::On(t) = edge[&e.id] {
                        if conclusion.as_ref().is_none_or(|(best, _)| t < *best) {
                            conclusion = Some((t, e.conclusion.clone().unwrap_or_default()));
                        }
                    }
                }
            }
            NodeKind::Step => {
                let at = incoming.iter().map(|r| r.time()).fold(0.0, f64::max);
                let out: Vec<&str> = dag.edges.iter().filter(|e| e.from == node).map(|e| e.id.as_str()).collect();
                if incoming.iter().any(|r| r.on()) {
                    let r = &realized[&node];
                    let finish = at + r.attempts.iter().sum::<f64>();
                    start_at.insert(node.clone(), at);
                    last_finish = last_finish.max(finish);
                    for e in out {
                        let on = r.decisions.as_ref().is_some_and(|d| d[e]);
                        edge.insert(e.to_string(), if on { Resolved::On(finish) } else { Resolved::Off(finish) });
                    }
                } else {
                    for e in out {
                        edge.insert(e.to_string(), Resolved::Off(at));
                    }
                }
            }
        }
    }
    let (critical_path, conclusion) = match conclusion {
        Some((t, c)) => (t, Some(c)),
        None => (last_finish, None),
    };

    // Realized subgraph: steps doing work before the run ends.
    let active: Vec<&String> = start_at
        .iter()
        .filter(|(_, t)| conclusion.is_none() || **t < critical_path)
        .map(|(n, _)| n)
        .collect();
    let width = max_antichain(dag, &active);

    Ok(OracleReport {
        critical_path,
        serial_sum: serial_fifo(dag, &kind, &realized),
        width,
        conclusion,
    })
}

/// One executor, ready steps served by (ready time, node order); each
/// attempt is a separate queue entry as in the engine.
fn serial_fifo(dag: &ExecutionDag, kind: &BTreeMap<&str, NodeKind>, realized: &BTreeMap<String, Realized>) -> f64 {
    let mut on: BTreeMap<&str, Option<bool>> = dag.edges.iter().map(|e| (e.id.as_str(), None)).collect();
    let mut node_done: BTreeSet<&str> = BTreeSet::new();
    let mut queue: Vec<(f64, &str, usize)> = Vec::new();
    let mut clock = 0.0;
    for e in dag.edges.iter().filter(|e| kind[e.from.as_str()] == NodeKind::Start) {
        on.insert(&e.id, Some(true));
    }
    node_done.extend(dag.nodes.iter().filter(|n| n.kind == NodeKind::Start).map(|n| n.id.as_str()));
    loop {
        // Resolve to a fixpoint.
        let mut changed = true;
        while changed {
            changed = false;
            for n in &dag.nodes {
                if node_done.contains(n.id.as_str()) {
                    continue;
                }
                let inc: Vec<Option<bool>> = dag.edges.iter().filter(|e| e.to == n.id).map(|e| on[e.id.as_str()]).collect();
                if n.kind == NodeKind::End {
                    if inc.contains(&Some(true)) {
                        return clock;
                    }
                    continue;
                }
                if inc.contains(&None) {
                    continue;
                }
                node_done.insert(&n.id);
                changed = true;
                if inc.contains(&Some(true)) {
                    queue.push((clock, &n.id, 0));
                } else {
                    for e in dag.edges.iter().filter(|e| e.from == n.id) {
                        on.insert(&e.id, Some(false));
                    }
                }
            }
        }
        let Some(i) = (0..queue.len()).min_by(|&a, &b| {
            queue[a]
                .0
                .total_cmp(&queue[b].0)
                .then_with(|| crate::dag::cmp_node_ids(queue[a].1, queue[b].1))
        }) else {
            return clock;
        };
        let (_, node, attempt) = queue.remove(i);
        let r = &realized[node];
        clock += r.attempts[attempt];
        if attempt + 1 < r.attempts.len() {
            queue.push((clock, node, attempt + 1));
            continue;
        }
        for e in dag.edges.iter().filter(|e| e.from == node) {
            let v = r.decisions.as_ref().is_some_and(|d| d[&e.id]);
            on.insert(&e.id, Some(v));
        }
    }
}

/// Largest set of pairwise unreachable nodes (Dilworth: nodes minus a
/// maximum matching in the reachability bipartite graph).
fn max_antichain(dag: &ExecutionDag, nodes: &[&String]) -> usize {
    let n = nodes.len();
    let reach = |from: &str, to: &str| -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(x) = stack.pop() {
            for e in dag.edges.iter().filter(|e| e.from == x) {
                if e.to == to {
                    return true;
                }
                if seen.insert(e.to.as_str()) {
                    stack.push(&e.to);
                }
            }
        }
        false
    };
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| i != j && reach(nodes[i], nodes[j])).collect())
        .collect();
    let mut match_right: Vec<Option<usize>> = vec![None; n];
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], match_right: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if match_right[v].is_none_or(|w| augment(w, adj, seen, match_right)) {
                match_right[v] = Some(u);
                return true;
            }
        }
        false
    }
    let matching = (0..n)
        .filter(|&u| augment(u, &adj, &mut vec![false; n], &mut match_right))
        .count();
    n - matching
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: usize,
    pub makespan: f64,
    pub executed: usize,
    pub cancelled: usize,
    pub status: String,
    /// `(baseline - makespan) / baseline`.
    pub reduction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    /// The bundle's sequential guide, run with one executor.
    SequentialVariant,
    /// The bundle's own DAG run with one executor.
    SingleExecutor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub tsg_id: String,
    pub scenario_id: String,
    pub baseline_source: BaselineSource,
    pub baseline_makespan: f64,
    pub entries: Vec<SweepEntry>,
    pub critical_path: f64,
    pub serial_sum: f64,
    pub width: usize,
    /// Makespan is the same for every k at or above the width.
    pub saturation_ok: bool,
    /// critical path <= makespan(k) <= serial sum for every k.
    pub bounds_ok: bool,
}

impl SweepReport {
    pub fn makespan(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.k == k).map(|e| e.makespan)
    }

    /// Reduction for `k` recomputed from the raw makespans.
    pub fn reduction(&self, k: usize) -> Option<f64> {
        self.makespan(k).map(|m| reduction(self.baseline_makespan, m))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn reduction(baseline: f64, makespan: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - makespan) / baseline
    }
}

/// Parses `A..B` (inclusive), `A,B,C` or a single count.
pub fn parse_executor_range(text: &str) -> Option<Vec<usize>> {
    let ks: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        (a..=b).collect()
    } else {
        text.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?
    };
    (!ks.is_empty() && ks.iter().all(|&k| k >= 1)).then_some(ks)
}

/// Runs the bundle once per executor count in virtual time.
pub fn sweep(bundle: &Bundle, scenario: &Scenario, ks: &[usize], retry_limit: u32) -> Result<SweepReport, HarnessError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(HarnessError::InvalidExecutors);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let config = |k: usize| RunConfig {
        max_executors: k,
        retry_limit,
        run_id: format!("{}-k{k}", scenario.id),
        ..RunConfig::default()
    };
    let mut runs = Vec::new();
    for &k in &ks {
        runs.push((k, bundle.run(scenario, &config(k))?));
    }
    let (baseline_source, baseline_makespan) = match bundle.run_baseline(scenario, &config(1)) {
        Some(r) => (BaselineSource::SequentialVariant, r?.makespan),
        None => {
            let m = match runs.iter().find(|(k, _)| *k == 1) {
                Some((_, r)) => r.makespan,
                None => bundle.run(scenario, &config(1))?.makespan,
            };
            (BaselineSource::SingleExecutor, m)
        }
    };
    let oracle = oracle_makespan(&bundle.guide.dag, scenario, retry_limit)?;
    let entries: Vec<SweepEntry> = runs
        .iter()
        .map(|(k, r)| SweepEntry {
            k: *k,
            makespan: r.makespan,
            executed: r.executed.len(),
            cancelled: r.cancelled.len(),
            status: r.status.name().to_string(),
            reduction: reduction(baseline_makespan, r.makespan),
        })
        .collect();
    let eps = 1e-9;
    let bounds_ok = entries
        .iter()
        .all(|e| oracle.critical_path <= e.makespan + eps && e.makespan <= oracle.serial_sum + eps);
    let saturated: Vec<f64> = entries.iter().filter(|e| e.k >= oracle.width).map(|e| e.makespan).collect();
    let saturation_ok = saturated.windows(2).all(|w| (w[0] - w[1]).abs() <= eps);
    Ok(SweepReport {
        tsg_id: bundle.tsg_id().to_string(),
        scenario_id: scenario.id.clone(),
        baseline_source,
        baseline_makespan,
        entries,
        critical_path: oracle.critical_path,
        serial_sum: oracle.serial_sum,
        width: oracle.width,
        saturation_ok,
        bounds_ok,
    })
}
