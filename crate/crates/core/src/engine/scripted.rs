use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, ClockMode, ExecutorBackend, Incident, StepContext, StepEnv};
use super::state::{EdgeDecision, StepOutcome, StepResult};
use crate::dag::{DagEdge, ExecutionDag};
use crate::memory::MemoryValue;
use crate::plugins::Args;
use crate::tsg::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginCall {
    pub plugin: String,
    #[serde(default)]
    pub args: BTreeMap<String, serde_json::Value>,
}

/// One recorded execution of a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAttempt {
    pub result: StepResult,
    #[serde(default)]
    pub latency: f64,
    /// Shorthand: enables conditional edges labelled with this answer and
    /// disables the others. Explicit `edge_decisions` take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Label>,
    #[serde(default)]
    pub edge_decisions: BTreeMap<String, EdgeDecision>,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub memory_writes: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plugin_calls: Vec<PluginCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptedAttempt {
    pub fn success(latency: f64) -> Self {
        ScriptedAttempt {
            result: StepResult::Success,
            latency,
            answer: None,
            edge_decisions: BTreeMap::new(),
            summary: String::new(),
            memory_writes: BTreeMap::new(),
            plugin_calls: Vec::new(),
            error: None,
        }
    }

    pub fn failure(latency: f64, error: &str) -> Self {
        ScriptedAttempt {
            result: StepResult::Failure,
            error: Some(error.to_string()),
            ..Self::success(latency)
        }
    }

    pub fn answering(mut self, label: Label) -> Self {
        self.answer = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub attempts: Vec<ScriptedAttempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub incident: Incident,
    pub steps: BTreeMap<String, ScenarioStep>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario has no attempts for {0}")]
    ScenarioIncomplete(String),
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("malformed scenario: {0}")]
    Malformed(String),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Malformed(e.to_string()))
    }

    /// Loads a scenario file; a missing `id` defaults to the file stem.
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let mut s = Scenario::from_json(&text)?;
        if s.id.is_empty() {
            s.id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
        }
        Ok(s)
    }

    /// Recorded latency of the n-th attempt (the last one repeats).
    pub fn latency(&self, node: &str, attempt: u32) -> Option<f64> {
        let step = self.steps.get(node)?;
        let i = (attempt.max(1) as usize - 1).min(step.attempts.len().checked_sub(1)?);
        Some(step.attempts[i].latency)
    }

    pub fn attempt(&self, node: &str, attempt: u32) -> Option<&ScriptedAttempt> {
        let step = self.steps.get(node)?;
        let i = (attempt.max(1) as usize - 1).min(step.attempts.len().checked_sub(1)?);
        step.attempts.get(i)
    }
}

/// Fills the decision map for `outgoing`: explicit decisions first, then
/// the answer shorthand for conditional edges; unconditional edges are
/// always enabled.
pub fn resolve_decisions(
    outgoing: &[DagEdge],
    answer: Option<Label>,
    explicit: &BTreeMap<String, EdgeDecision>,
) -> BTreeMap<String, EdgeDecision> {
    let mut out = explicit.clone();
    for e in outgoing {
        if out.contains_key(&e.id) {
            continue;
        }
        match (&e.condition, answer) {
            (None, _) => {
                out.insert(e.id.clone(), EdgeDecision::Enable);
            }
            (Some(c), Some(a)) => {
                let d = if c.label == a { EdgeDecision::Enable } else { EdgeDecision::Disable };
                out.insert(e.id.clone(), d);
            }
            (Some(_), None) => {}
        }
    }
    out
}

/// Deterministic backend replaying a scenario.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    scenario: Scenario,
    /// Wall-clock length of one latency unit.
    pub time_unit: Duration,
}

impl ScriptedBackend {
    pub fn from_scenario(scenario: Scenario) -> Result<ScriptedBackend, ScenarioError> {
        if let Some((node, _)) = scenario.steps.iter().find(|(_, s)| s.attempts.is_empty()) {
            return Err(ScenarioError::ScenarioIncomplete(node.clone()));
        }
        Ok(ScriptedBackend {
            scenario,
            time_unit: Duration::from_millis(1),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn sleep(&self, latency: f64, env: &StepEnv<'_>) -> Result<(), BackendError> {
        let deadline = Instant::now() + self.time_unit.mul_f64(latency.max(0.0));
        loop {
            if env.cancelled() {
                return Err(BackendError::Cancelled);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(());
            }
            std::thread::sleep((deadline - now).min(Duration::from_millis(2)));
        }
    }
}

impl ExecutorBackend for ScriptedBackend {
    fn check(&self, dag: &ExecutionDag) -> Result<(), BackendError> {
        match dag.step_nodes().find(|n| !self.scenario.steps.contains_key(&n.id)) {
            Some(n) => Err(BackendError::ScenarioIncomplete(n.id.clone())),
            None => Ok(()),
        }
    }

    fn execute(&self, ctx: &StepContext, env: &StepEnv<'_>) -> Result<StepOutcome, BackendError> {
        let attempt = self
            .scenario
            .attempt(&ctx.node.id, ctx.attempt)
            .ok_or_else(|| BackendError::ScenarioIncomplete(ctx.node.id.clone()))?;
        if env.clock == ClockMode::Wall {
            self.sleep(attempt.latency, env)?;
        }
        let mut written = Vec::new();
        for call in &attempt.plugin_calls {
            let args: Result<Args, _> = call
                .args
                .iter()
                .map(|(k, v)| MemoryValue::from_literal(v).map(|v| (k.clone(), v)))
                .collect();
            let result = args.map_err(|e| e.to_string()).and_then(|a| {
                let a = match env.plugins.get(&call.plugin) {
                    Some(p) => p.descriptor().coerce(a),
                    None => a,
                };
                env.plugins.invoke(&call.plugin, &a, env.memory).map_err(|e| e.to_string())
            });
            match result {
                Ok(r) => written.extend(r.refs.into_iter().map(|r| r.key)),
                Err(e) => return Ok(StepOutcome::failure(e).with_duration(attempt.latency)),
            }
        }
        for (key, literal) in &attempt.memory_writes {
            let value = MemoryValue::from_literal(literal).map_err(|e| BackendError::Step(e.to_string()))?;
            env.memory.put(key, value).map_err(|e| BackendError::Step(e.to_string()))?;
            written.push(key.clone());
        }
        let outcome = match attempt.result {
            StepResult::Success => StepOutcome {
                result: StepResult::Success,
                summary: attempt.summary.clone(),
                edge_decisions: resolve_decisions(&ctx.outgoing, attempt.answer, &attempt.edge_decisions),
                memory_writes: written,
                error: None,
                duration: attempt.latency,
            },
            StepResult::Failure => StepOutcome {
                summary: attempt.summary.clone(),
                memory_writes: written,
                ..StepOutcome::failure(attempt.error.clone().unwrap_or_else(|| "scripted failure".into()))
                    .with_duration(attempt.latency)
            },
        };
        Ok(outcome)
    }
}
