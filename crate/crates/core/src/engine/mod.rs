//! Scheduler and executor pool: tri-state propagation over the execution
//! DAG, a FIFO ready queue, up to `k` concurrent executors, retries, early
//! termination and a JSON Lines trace.

mod backend;
mod external;
mod scripted;
mod state;
mod trace;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use backend::{
    BackendError, ClockMode, CommittedWrite, ExecutorBackend, Incident, StagedMemory, StepContext, StepEnv,
};
pub use external::ExternalProcessBackend;
pub use scripted::{
    resolve_decisions, PluginCall, Scenario, ScenarioError, ScenarioStep, ScriptedAttempt, ScriptedBackend,
};
pub use state::{
    EdgeDecision, ElementState, EngineError, HistoryEntry, RunState, RunStatus, StepOutcome, StepResult,
};
pub use trace::{detail, trace_from_jsonl, trace_to_jsonl, EventKind, Trace, TraceEvent};

use crate::dag::{cmp_node_ids, DagIndex, ExecutionDag};
use crate::memory::{Blackboard, InMemoryStore, MemoryRef, RunScope};
use crate::plugins::PluginRegistry;
use crate::qpp::QueryTemplate;
use crate::tsg::{StepId, TsgDocument};

/// What a run executes: the DAG plus, optionally, the guide it came from
/// (for step text) and its query templates.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub doc: Option<TsgDocument>,
    pub dag: ExecutionDag,
    pub templates: Vec<QueryTemplate>,
}

impl RunBundle {
    pub fn from_dag(dag: ExecutionDag) -> Self {
        RunBundle {
            doc: None,
            dag,
            templates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_executors: usize,
    pub retry_limit: u32,
    pub clock: ClockMode,
    pub run_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_executors: 1,
            retry_limit: 2,
            clock: ClockMode::Virtual,
            run_id: "run".into(),
        }
    }
}

impl RunConfig {
    pub fn with_executors(k: usize) -> Self {
        RunConfig {
            max_executors: k,
            ..Self::default()
        }
    }
}

/// Services shared by the executors of a run.
pub struct RunEnv {
    pub plugins: PluginRegistry,
    pub memory: Arc<dyn Blackboard>,
}

impl Default for RunEnv {
    fn default() -> Self {
        RunEnv {
            plugins: PluginRegistry::new(),
            memory: Arc::new(InMemoryStore::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub tsg_id: String,
    pub status: RunStatus,
    pub conclusion: Option<String>,
    pub makespan: f64,
    /// Step nodes that ran to completion (success or final failure).
    pub executed: Vec<String>,
    pub cancelled: Vec<String>,
    pub failed: Vec<String>,
    pub disabled: Vec<String>,
    pub trace: Vec<TraceEvent>,
}

impl RunReport {
    pub fn trace_jsonl(&self) -> String {
        trace_to_jsonl(&self.trace)
    }

    pub fn count(&self, kind: EventKind, subject: &str) -> usize {
        self.trace.iter().filter(|e| e.kind == kind && e.subject == subject).count()
    }
}

struct Runner<'a> {
    bundle: &'a RunBundle,
    index: DagIndex,
    backend: &'a dyn ExecutorBackend,
    config: &'a RunConfig,
    incident: &'a Incident,
    plugins: &'a PluginRegistry,
    memory: Arc<dyn Blackboard>,
    refs: Vec<MemoryRef>,
    state: RunState,
}

impl Runner<'_> {
    fn context(&self, node: &str, attempt: u32) -> StepContext {
        let dag_node = self.index.dag.node(node).expect("scheduled node exists").clone();
        let step_text = dag_node
            .step_ref
            .as_deref()
            .and_then(StepId::parse)
            .and_then(|id| self.bundle.doc.as_ref()?.step(&id).map(|s| s.render_text()))
            .unwrap_or_else(|| dag_node.description.clone());
        StepContext {
            run_id: self.config.run_id.clone(),
            incident: self.incident.clone(),
            step_text,
            node: dag_node,
            outgoing: self.index.outgoing(node).cloned().collect(),
            history: self.state.history.clone(),
            plugins: self.plugins.descriptors(),
            qpp: self.bundle.templates.iter().map(|t| t.name.clone()).collect(),
            memory: self.refs.clone(),
            attempt,
        }
    }

    /// Turns a backend result into a state transition.
    fn complete(&mut self, node: &str, result: Result<StepOutcome, BackendError>, staged: &StagedMemory) -> Result<(), EngineError> {
        let outcome = match result {
            Ok(o) => o,
            Err(BackendError::Unavailable(m)) => {
                self.state.fail(m);
                return Ok(());
            }
            Err(BackendError::Cancelled) => StepOutcome::failure("executor stopped without an outcome"),
            Err(e) => StepOutcome::failure(e.to_string()),
        };
        self.state.validate_outcome(&self.index, node, &outcome)?;
        if outcome.result == StepResult::Success {
            for w in staged.commit()? {
                self.state.emit(
                    EventKind::MemoryPut,
                    &w.key,
                    detail([("bytes", json!(w.bytes)), ("node", json!(node)), ("overwrite", json!(w.overwrite))]),
                );
                self.refs.retain(|r| r.key != w.key);
                self.refs.push(w.reference);
            }
        }
        self.state.apply_outcome(&self.index, node, &outcome)
    }

    fn run_virtual(&mut self) -> Result<(), EngineError> {
        struct Pending {
            finish: f64,
            node: String,
            result: Result<StepOutcome, BackendError>,
            staged: StagedMemory,
        }
        let mut pending: Vec<Pending> = Vec::new();
        let never = AtomicBool::new(false);
        while self.state.status == RunStatus::Running {
            while self.state.running.len() < self.config.max_executors {
                let Some(node) = self.state.pop_ready() else { break };
                let attempt = self.state.mark_started(&node);
                let ctx = self.context(&node, attempt);
                let staged = StagedMemory::new(self.memory.clone());
                let env = StepEnv {
                    memory: &staged,
                    plugins: self.plugins,
                    cancel: &never,
                    clock: ClockMode::Virtual,
                };
                let result = self.backend.execute(&ctx, &env);
                let duration = result.as_ref().map(|o| o.duration.max(0.0)).unwrap_or(0.0);
                pending.push(Pending {
                    finish: self.state.clock + duration,
                    node,
                    result,
                    staged,
                });
            }
            if self.state.check_exhausted() {
                break;
            }
            let next = pending
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.finish.total_cmp(&b.1.finish).then_with(|| cmp_node_ids(&a.1.node, &b.1.node)))
                .map(|(i, _)| i)
                .expect("a running node has a pending completion");
            let p = pending.swap_remove(next);
            self.state.clock = p.finish;
            self.complete(&p.node, p.result, &p.staged)?;
        }
        Ok(())
    }

    fn run_wall(&mut self) -> Result<(), EngineError> {
        type Completion = (String, u32, Result<StepOutcome, BackendError>, StagedMemory);
        let started = Instant::now();
        let backend = self.backend;
        let plugins = self.plugins;
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<Completion>();
            let mut cancels: BTreeMap<String, (u32, Arc<AtomicBool>)> = BTreeMap::new();
            let cancel_all = |cancels: &BTreeMap<String, (u32, Arc<AtomicBool>)>| {
                for (_, c) in cancels.values() {
                    c.store(true, Ordering::SeqCst);
                }
            };
            while self.state.status == RunStatus::Running {
                self.state.clock = started.elapsed().as_secs_f64();
                while self.state.running.len() < self.config.max_executors {
                    let Some(node) = self.state.pop_ready() else { break };
                    let attempt = self.state.mark_started(&node);
                    let ctx = self.context(&node, attempt);
                    let staged = StagedMemory::new(self.memory.clone());
                    let cancel = Arc::new(AtomicBool::new(false));
                    cancels.insert(node.clone(), (attempt, cancel.clone()));
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let env = StepEnv {
                            memory: &staged,
                            plugins,
                            cancel: &cancel,
                            clock: ClockMode::Wall,
                        };
                        let result = backend.execute(&ctx, &env);
                        let _ = tx.send((ctx.node.id.clone(), ctx.attempt, result, staged));
                    });
                }
                if self.state.check_exhausted() {
                    break;
                }
                let (node, attempt, result, staged) = rx.recv().expect("executors hold a sender");
                self.state.clock = started.elapsed().as_secs_f64();
                if cancels.get(&node).map(|(a, _)| *a) != Some(attempt) || !self.state.running.contains_key(&node) {
                    continue;
                }
                cancels.remove(&node);
                if let Err(e) = self.complete(&node, result, &staged) {
                    cancel_all(&cancels);
                    return Err(e);
                }
            }
            cancel_all(&cancels);
            Ok(())
        })
    }
}

/// Executes a bundle to conclusion, exhaustion or backend failure.
pub fn run(
    bundle: &RunBundle,
    backend: &dyn ExecutorBackend,
    config: &RunConfig,
    incident: &Incident,
    env: &RunEnv,
) -> Result<RunReport, EngineError> {
    if config.max_executors < 1 {
        return Err(EngineError::ConfigInvalid("max_executors must be at least 1".into()));
    }
    let index = DagIndex::new(&bundle.dag).map_err(EngineError::DagInvalid)?;
    backend.check(&index.dag).map_err(|e| match e {
        BackendError::ScenarioIncomplete(n) => EngineError::ScenarioIncomplete(n),
        other => EngineError::BackendUnavailable(other.to_string()),
    })?;
    let memory: Arc<dyn Blackboard> = Arc::new(RunScope::new(env.memory.clone(), config.run_id.clone()));
    let state = RunState::new(&index, config.retry_limit);
    let mut runner = Runner {
        bundle,
        index,
        backend,
        config,
        incident,
        plugins: &env.plugins,
        memory,
        refs: Vec::new(),
        state,
    };
    runner.state.start(&runner.index, &config.run_id);
    match config.clock {
        ClockMode::Virtual => runner.run_virtual()?,
        ClockMode::Wall => runner.run_wall()?,
    }
    runner.state.terminate();
    let state = runner.state;
    let mut executed: Vec<String> = state.completed.iter().cloned().collect();
    executed.sort_by(|a, b| cmp_node_ids(a, b));
    Ok(RunReport {
        run_id: config.run_id.clone(),
        tsg_id: runner.index.dag.tsg_id.clone(),
        conclusion: match &state.status {
            RunStatus::Concluded(c) => Some(c.clone()),
            _ => None,
        },
        status: state.status.clone(),
        makespan: state.clock,
        executed,
        cancelled: state::sorted(&state.cancelled),
        failed: state::sorted(&state.failed),
        disabled: state.disabled_nodes(),
        trace: state.into_trace().into_events(),
    })
}

/// Replays a scenario with the scripted backend.
pub fn run_scripted(
    bundle: &RunBundle,
    scenario: &Scenario,
    config: &RunConfig,
    env: &RunEnv,
) -> Result<RunReport, EngineError> {
    let backend = ScriptedBackend::from_scenario(scenario.clone()).map_err(|e| match e {
        ScenarioError::ScenarioIncomplete(n) => EngineError::ScenarioIncomplete(n),
        other => EngineError::ConfigInvalid(other.to_string()),
    })?;
    run(bundle, &backend, config, &scenario.incident, env)
}
