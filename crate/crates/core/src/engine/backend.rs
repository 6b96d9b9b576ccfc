use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::state::HistoryEntry;
use crate::dag::{DagEdge, DagNode, ExecutionDag};
use crate::memory::{Blackboard, MemoryError, MemoryRef, MemoryValue};
use crate::plugins::{PluginDescriptor, PluginRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub id: String,
    #[serde(default)]
    pub fields: BTreeMap<String, serde_json::Value>,
}

/// Everything an executor sees for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub run_id: String,
    pub incident: Incident,
    pub step_text: String,
    pub node: DagNode,
    pub outgoing: Vec<DagEdge>,
    pub history: Vec<HistoryEntry>,
    pub plugins: Vec<PluginDescriptor>,
    pub qpp: Vec<String>,
    pub memory: Vec<MemoryRef>,
    pub attempt: u32,
}

/// Shared services handed to a backend for one step execution.
pub struct StepEnv<'a> {
    pub memory: &'a dyn Blackboard,
    pub plugins: &'a PluginRegistry,
    pub cancel: &'a AtomicBool,
    pub clock: ClockMode,
}

impl StepEnv<'_> {
    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("cancelled")]
    Cancelled,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("scenario has no attempts for {0}")]
    ScenarioIncomplete(String),
    #[error("{0}")]
    Step(String),
}

pub trait ExecutorBackend: Send + Sync {
    /// Called once before a run; reports nodes the backend cannot serve.
    fn check(&self, _dag: &ExecutionDag) -> Result<(), BackendError> {
        Ok(())
    }

    fn execute(&self, ctx: &StepContext, env: &StepEnv<'_>) -> Result<super::state::StepOutcome, BackendError>;
}

/// Write buffer over the run's memory. Reads fall through to the parent;
/// writes become visible to other steps only after [`StagedMemory::commit`].
pub struct StagedMemory {
    parent: Arc<dyn Blackboard>,
    writes: Mutex<Vec<(String, MemoryValue)>>,
}

/// A committed write, as recorded in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittedWrite {
    pub key: String,
    pub overwrite: bool,
    pub bytes: usize,
    pub reference: MemoryRef,
}

impl StagedMemory {
    pub fn new(parent: Arc<dyn Blackboard>) -> Self {
        StagedMemory {
            parent,
            writes: Mutex::new(Vec::new()),
        }
    }

    pub fn staged_keys(&self) -> Vec<String> {
        self.writes.lock().unwrap().iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn commit(&self) -> Result<Vec<CommittedWrite>, MemoryError> {
        let writes = std::mem::take(&mut *self.writes.lock().unwrap());
        let mut out = Vec::with_capacity(writes.len());
        for (key, value) in writes {
            let overwrite = self.parent.contains(&key);
            let bytes = value.byte_size();
            let reference = self.parent.put(&key, value)?;
            out.push(CommittedWrite {
                key,
                overwrite,
                bytes,
                reference,
            });
        }
        Ok(out)
    }
}

impl Blackboard for StagedMemory {
    fn put(&self, key: &str, value: MemoryValue) -> Result<MemoryRef, MemoryError> {
        crate::memory::validate_key(key)?;
        let r = MemoryRef::new(key, &value);
        let mut w = self.writes.lock().unwrap();
        w.retain(|(k, _)| k != key);
        w.push((key.to_string(), value));
        Ok(r)
    }

    fn get(&self, key: &str) -> Result<MemoryValue, MemoryError> {
        let staged = self.writes.lock().unwrap().iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        match staged {
            Some(v) => Ok(v),
            None => self.parent.get(key),
        }
    }

    fn contains(&self, key: &str) -> bool {
        self.writes.lock().unwrap().iter().any(|(k, _)| k == key) || self.parent.contains(key)
    }

    fn keys(&self) -> Vec<String> {
        let mut keys = self.parent.keys();
        for k in self.staged_keys() {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.sort();
        keys
    }

    fn fresh_key(&self, prefix: &str) -> String {
        self.parent.fresh_key(prefix)
    }
}
